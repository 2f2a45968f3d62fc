/* tslint:disable */
/* eslint-disable */

export function balance_run(seed: number, experts: number, k: number, skew: number, steps: number, lr: number): Float64Array;

export function band_means(seed: number, size: number, classes: number, channels: number, strength: number): Float64Array;

export function render_labels(seed: number, size: number, classes: number, channels: number): Uint8Array;

export function render_scene(seed: number, size: number, classes: number, channels: number, strength: number): Uint8Array;

export function route_point(x: number, y: number, protos: Float64Array, k: number, p: number): Float64Array;

export function routing_map(protos: Float64Array, k: number, p: number, size: number): Uint8Array;

export function signatures(classes: number, channels: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly balance_run: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly band_means: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly render_labels: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly render_scene: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly route_point: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly routing_map: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly signatures: (a: number, b: number) => [number, number, number, number];
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
