/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_tilingdemo_free: (a: number, b: number) => void;
export const anyres_grid: (a: number, b: number, c: number) => [number, number, number, number];
export const lr_curves: (a: number, b: number) => [number, number, number, number];
export const tilingdemo_mask_cells: (a: number) => [number, number];
export const tilingdemo_new: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
export const tilingdemo_regions_json: (a: number) => [number, number];
export const tilingdemo_thumb_height: (a: number) => number;
export const tilingdemo_thumb_width: (a: number) => number;
export const tilingdemo_thumbnail_rgba: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
