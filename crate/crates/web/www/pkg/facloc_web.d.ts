/* tslint:disable */
/* eslint-disable */

export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    constructor(loss: string, seed: number, cluster_std: number);
    snapshot(): string;
    /**
     * Runs `n` iterations and returns a snapshot.
     */
    step(n: number): string;
}

/**
 * Inference report for points `[[x, y], ...]` with class ids `[c, ...]`.
 */
export function inference(points: string, labels: string, gamma: number, refine_iters: number): string;

/**
 * NMI report for two label arrays.
 */
export function nmi_table(a: string, b: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly inference: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly nmi_table: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly trainer_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly trainer_snapshot: (a: number) => [number, number, number, number];
    readonly trainer_step: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
