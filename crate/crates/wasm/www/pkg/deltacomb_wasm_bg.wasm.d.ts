/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const alpha_curve: (a: number, b: number) => [number, number, number, number];
export const prufer_summary: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const transfer_convergence: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
