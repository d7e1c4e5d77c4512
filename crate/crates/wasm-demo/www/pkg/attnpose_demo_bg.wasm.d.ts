/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_attention_target: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_gt_pose: (a: number) => [number, number];
export const scene_is_empty: (a: number) => number;
export const scene_len: (a: number) => number;
export const scene_model_positions: (a: number) => [number, number];
export const scene_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const scene_scene_in_model_frame: (a: number) => [number, number];
export const scene_solve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
