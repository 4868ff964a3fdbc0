/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_invarianceprobe_free: (a: number, b: number) => void;
export const gtrelu_domain: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const invarianceprobe_new: (a: number, b: number) => [number, number, number];
export const invarianceprobe_probe: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const lab_distort: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
