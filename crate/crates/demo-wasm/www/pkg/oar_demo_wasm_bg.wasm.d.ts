/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_generation_free: (a: number, b: number) => void;
export const demo_generate: (a: number, b: number, c: number) => [number, number, number];
export const demo_new: (a: number) => [number, number, number];
export const demo_side: (a: number) => number;
export const generation_forward_count: (a: number) => number;
export const generation_mean_distance: (a: number) => number;
export const generation_ranks: (a: number) => [number, number];
export const generation_tokens: (a: number) => [number, number];
export const gumbel_frequencies: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const order_distance: (a: number, b: number, c: number, d: number) => [number, number, number];
export const truncated_softmax: (a: number, b: number, c: number) => [number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
