/* tslint:disable */
/* eslint-disable */

/**
 * JSON array of `{k, activation_streamed_us, weight_streamed_us, ratio}`.
 */
export function orderSweep(hidden: number, ffn: number, ks: Uint32Array): string;

/**
 * JSON array of `{seq_len, padding_ms, hetero_tensor_ms, gpu_only_ms}`.
 */
export function prefillCurve(from: number, to: number, step: number, sync_us_scale: number): string;

/**
 * JSON array of `{m, latency_us}`.
 */
export function stageSweep(n: number, k: number, max_m: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly orderSweep: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly prefillCurve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly stageSweep: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
