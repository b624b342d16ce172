/* tslint:disable */
/* eslint-disable */

/**
 * Per-frame teacher cosines for one synthetic query and its planted moment.
 */
export class TeacherView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Inclusive last frame of the moment.
     */
    readonly end: number;
    readonly mv: number;
    readonly scores: Float64Array;
    readonly start: number;
}

/**
 * `g(t)` for `t = 0..=t_max`.
 */
export function decay_curve(kind: string, factor: number, intercept: number, t_max: number): Float64Array;

export function planted_teacher(frames: number, quality: number, noise_std: number, mv_lo: number, mv_hi: number, seed: bigint): TeacherView;

/**
 * Text→video soft targets for a row-major `n × n` guidance matrix whose rows
 * are queries and columns are videos.
 */
export function soft_targets(guidance: Float64Array, n: number, alpha: number, beta: number, row_normalize: boolean): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_teacherview_free: (a: number, b: number) => void;
    readonly decay_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly planted_teacher: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly soft_targets: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly teacherview_end: (a: number) => number;
    readonly teacherview_mv: (a: number) => number;
    readonly teacherview_scores: (a: number) => [number, number];
    readonly teacherview_start: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
