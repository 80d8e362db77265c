/* tslint:disable */
/* eslint-disable */

/**
 * A randomly initialised 8×8 model whose logits are perturbed enough to
 * give non-trivial orders.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Ordered generation with distance penalty `lambda`.
     */
    generate(lambda: number, seed: number): Generation;
    constructor(seed: number);
    side(): number;
}

export class Generation {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Generation rank of each cell, row-major.
     */
    ranks(): Uint32Array;
    tokens(): Uint32Array;
    readonly forward_count: number;
    readonly mean_distance: number;
}

/**
 * Empirical frequencies of Gumbel top-k draws over `logits`.
 */
export function gumbel_frequencies(logits: Float64Array, k: number, draws: number, seed: number): Float64Array;

/**
 * Average L∞ step distance of raster order, or the mean over `trials`
 * uniform orders, on a `side`×`side` grid.
 */
export function order_distance(side: number, random: boolean, trials: number, seed: number): number;

/**
 * Softmax restricted to the `k` largest logits (ties to the lower index).
 */
export function truncated_softmax(logits: Float64Array, k: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_generation_free: (a: number, b: number) => void;
    readonly demo_generate: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_side: (a: number) => number;
    readonly generation_forward_count: (a: number) => number;
    readonly generation_mean_distance: (a: number) => number;
    readonly generation_ranks: (a: number) => [number, number];
    readonly generation_tokens: (a: number) => [number, number];
    readonly gumbel_frequencies: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly order_distance: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly truncated_softmax: (a: number, b: number, c: number) => [number, number];
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
