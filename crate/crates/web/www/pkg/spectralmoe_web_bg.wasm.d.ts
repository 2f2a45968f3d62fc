/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const balance_run: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const band_means: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const render_labels: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const render_scene: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const route_point: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const routing_map: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const signatures: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
