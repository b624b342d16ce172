/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_teacherview_free: (a: number, b: number) => void;
export const decay_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const planted_teacher: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const soft_targets: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const teacherview_end: (a: number) => number;
export const teacherview_mv: (a: number) => number;
export const teacherview_scores: (a: number) => [number, number];
export const teacherview_start: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
