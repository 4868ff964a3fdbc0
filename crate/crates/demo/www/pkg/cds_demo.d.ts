/* tslint:disable */
/* eslint-disable */

/**
 * Relative change of the logits when the input is multiplied by a complex
 * scalar, for an untrained invariant network and a plain complex network.
 */
export class InvarianceProbe {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Networks for `size × size` LAB images and 10 classes, seeded.
     */
    constructor(size: number, seed: number);
    /**
     * JSON list of `{model, parameters, relative_change, class, scaled_class}`.
     */
    probe(rgba: Uint8Array, mag: number, phase: number): string;
}

/**
 * Domain colouring of the plane `[-extent, extent]²` (left half of the
 * output) next to its image under GTReLU with the given `r`, `c` and `ω`
 * (right half). Returns `2·size × size` RGBA bytes.
 */
export function gtrelu_domain(size: number, extent: number, r: number, c_mag: number, c_phase: number, omega: number): Uint8Array;

/**
 * Multiplies the LAB encoding of an image by `mag·e^{i·phase}` and decodes
 * it again. With `chroma_only` the luminance channel is left alone, so the
 * phase becomes a pure hue rotation in the a*b* plane.
 */
export function lab_distort(rgba: Uint8Array, width: number, height: number, mag: number, phase: number, chroma_only: boolean): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_invarianceprobe_free: (a: number, b: number) => void;
    readonly gtrelu_domain: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly invarianceprobe_new: (a: number, b: number) => [number, number, number];
    readonly invarianceprobe_probe: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly lab_distort: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
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
