/* tslint:disable */
/* eslint-disable */

/**
 * A synthetic slide, its tissue mask and the planned regions.
 */
export class TilingDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * One byte per mask cell, 1 for tissue.
     */
    mask_cells(): Uint8Array;
    constructor(seed: bigint, width: number, height: number, blobs: number, region_size: number, downsample: number, saturation_threshold: number, min_tissue_fraction: number);
    /**
     * `{region_size, tiles, regions: [{x, y, tissue_fraction}]}`
     */
    regions_json(): string;
    /**
     * RGBA bytes, `thumb_width x thumb_height`.
     */
    thumbnail_rgba(): Uint8Array;
    readonly thumb_height: number;
    readonly thumb_width: number;
}

/**
 * `{rows, cols, cell_w, cell_h, global_view, patches: [[x, y, w, h]]}`
 */
export function anyres_grid(width: number, height: number, base_cell: number): string;

/**
 * `{stage, warmup_steps, groups: {name: {base_lr, curve}}, frozen: [..]}`
 */
export function lr_curves(stage: number, total_steps: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_tilingdemo_free: (a: number, b: number) => void;
    readonly anyres_grid: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lr_curves: (a: number, b: number) => [number, number, number, number];
    readonly tilingdemo_mask_cells: (a: number) => [number, number];
    readonly tilingdemo_new: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
    readonly tilingdemo_regions_json: (a: number) => [number, number];
    readonly tilingdemo_thumb_height: (a: number) => number;
    readonly tilingdemo_thumb_width: (a: number) => number;
    readonly tilingdemo_thumbnail_rgba: (a: number) => [number, number];
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
