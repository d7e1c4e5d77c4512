/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Row-major `N×N` PPF weight matrix for the given gammas.
     */
    attention_target(distance: number, cross_angle: number, normal_angle: number): Float64Array;
    /**
     * Ground-truth pose as `[w, x, y, z, tx, ty, tz]`.
     */
    gt_pose(): Float64Array;
    is_empty(): boolean;
    len(): number;
    /**
     * Model points, `[x0, y0, z0, x1, ...]`, in the model frame.
     */
    model_positions(): Float64Array;
    /**
     * Renders one scene of `shape` ("box", "box_with_bump", "cylinder" or
     * "sphere") with `n_points` points.
     */
    constructor(shape: string, n_points: number, noise_sigma: number, occlusion: number, seed: number);
    /**
     * Scene points mapped back into the model frame with the true pose.
     */
    scene_in_model_frame(): Float64Array;
    /**
     * Solves the pose from the scene's ground-truth correspondences with
     * `"kabsch"` or `"pair-align"`. Returns the pose followed by rotation
     * error (degrees), translation error (m) and ADD as a fraction of the
     * model diameter.
     */
    solve(solver: string, num_pairs: number, seed: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_attention_target: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_gt_pose: (a: number) => [number, number];
    readonly scene_is_empty: (a: number) => number;
    readonly scene_len: (a: number) => number;
    readonly scene_model_positions: (a: number) => [number, number];
    readonly scene_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly scene_scene_in_model_frame: (a: number) => [number, number];
    readonly scene_solve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
