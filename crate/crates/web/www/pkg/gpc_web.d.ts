/* tslint:disable */
/* eslint-disable */

/**
 * Energies between two 1-D Gaussians `N(u, var)` and `N(uh, varh)`:
 * `[squared error of the means, KL, Monte-Carlo KL with `samples` draws]`.
 */
export function gaussian_energies(u: number, _var: number, uh: number, varh: number, samples: number, seed: bigint): Float64Array;

/**
 * Total energy after each of `steps` value updates on a small random
 * classifier with its output clamped to a one-hot label. Returns the F
 * curve followed by the KL curve, each `steps + 1` long.
 */
export function inference_curves(beta_phi: number, steps: number, seed: bigint): Float64Array;

/**
 * Median absolute error of the sampled categorical KL over `seeds` runs,
 * for N = 10, 100, ..., 10^`max_pow`.
 */
export function mc_convergence(classes: number, max_pow: number, seeds: bigint, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly gaussian_energies: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly inference_curves: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly mc_convergence: (a: number, b: number, c: bigint, d: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
