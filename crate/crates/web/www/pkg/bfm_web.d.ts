/* tslint:disable */
/* eslint-disable */

export function dro_weights(losses: Float64Array, prior: Float64Array, epsilon: number): Float64Array;

export function optimal_split(c_n: number, alpha: number, c_d: number, beta: number, budget: number): Float64Array;

export function scaling_curve(c_n: number, alpha: number, c_d: number, beta: number, l0: number, n: number, d_min: number, d_max: number, points: number): Float64Array;

export function synthetic_histogram(n_behaviors: number, zipf_exponent: number, n_users: number, records_per_user: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly dro_weights: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly optimal_split: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly scaling_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly synthetic_histogram: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
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
