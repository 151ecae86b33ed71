/* tslint:disable */
/* eslint-disable */

/**
 * Per-strategy relative error and gradient-evaluation count on a seeded
 * family of quadratic bi-level problems. `lo`/`hi` bound the spectrum of
 * the inner Hessian.
 */
export function hypergrad_errors(seed: number, problems: number, lo: number, hi: number): string;

/**
 * KL(target || current) after normalizing both weight lists.
 */
export function kl_explore(target: string, current: string): string;

/**
 * Trains a small encoder on 4-class blobs and reports the per-episode
 * losses plus final probe accuracies. `mode` is `gessl` or `baseline`.
 */
export function train_curve(seed: number, episodes: number, beta: number, mode: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly hypergrad_errors: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly kl_explore: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly train_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
