/* tslint:disable */
/* eslint-disable */

/**
 * `α(E)` and `β(E)` sampled across the window `J(λ)`.
 */
export function alpha_curve(lambda: number, points: number): string;

/**
 * Prüfer trace of one realization, sampled on a log grid of blocks.
 * `lambda = 0` selects the unperturbed comb.
 */
export function prufer_summary(energy: number, lambda: number, n_blocks: number, seed: number, index: number): string;

/**
 * Distance between the block matrix and its limit, for `a = 10^{-1..-8}`.
 */
export function transfer_convergence(energy: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly alpha_curve: (a: number, b: number) => [number, number, number, number];
    readonly prufer_summary: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly transfer_convergence: (a: number) => [number, number, number, number];
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
