/** Studio state: immutable snapshots updated through pure transition functions.
 *
 * Invariants:
 * - the preview is marked stale whenever the light spec changes, and becomes
 *   fresh only when a preview response for the *current* spec revision arrives;
 * - relight submission is blocked while the preview is stale;
 * - edits never mutate persisted results (state transitions always return new
 *   objects and leave the results list untouched).
 */

import { LightProbe, LightSpec, SceneBounds, Vec3, clampPosition, serializeSpec } from "./spec.js";

export type JobState = "queued" | "running" | "done" | "failed";

export interface JobView {
  id: string;
  state: JobState;
  progress: number;
  result?: string;
  error?: string;
}

export interface ResultView {
  id: string;
  specJson: string; // spec the result was produced from, serialized
}

export interface StudioState {
  projectId: string | null;
  spec: LightSpec;
  /** Monotone counter bumped on every spec edit. */
  specRevision: number;
  previewUrl: string | null;
  /** Revision the current previewUrl was rendered from. */
  previewRevision: number;
  previewStale: boolean;
  lastEditClamped: boolean;
  jobs: JobView[];
  results: ResultView[];
  /** A/B compare: result id on the B side (A side is always the source). */
  compareResult: string | null;
  wipePosition: number; // 0..1 slider for the A/B wipe
}

export class StalePreviewError extends Error {
  constructor() {
    super("preview is stale; refresh it before submitting a relight");
    this.name = "StalePreviewError";
  }
}

export class NoProjectError extends Error {
  constructor() {
    super("no project loaded");
    this.name = "NoProjectError";
  }
}

export function initialState(): StudioState {
  return {
    projectId: null,
    spec: { lights: [], roughness: 0.5 },
    specRevision: 0,
    previewUrl: null,
    previewRevision: -1,
    previewStale: true,
    lastEditClamped: false,
    jobs: [],
    results: [],
    compareResult: null,
    wipePosition: 0.5,
  };
}

export function loadProject(state: StudioState, projectId: string): StudioState {
  return { ...initialState(), projectId };
}

function withSpec(state: StudioState, spec: LightSpec, clamped = false): StudioState {
  return {
    ...state,
    spec,
    specRevision: state.specRevision + 1,
    previewStale: true,
    lastEditClamped: clamped,
  };
}

export function addProbe(state: StudioState, probe: LightProbe, bounds: SceneBounds): StudioState {
  if (state.projectId === null) throw new NoProjectError();
  let clamped = false;
  let placed = probe;
  if (probe.kind === "point" && probe.position) {
    const c = clampPosition(probe.position, bounds);
    clamped = c.clamped;
    placed = { ...probe, position: c.pos };
  }
  return withSpec(state, { ...state.spec, lights: [...state.spec.lights, placed] }, clamped);
}

export function moveProbe(
  state: StudioState,
  index: number,
  position: Vec3,
  bounds: SceneBounds
): StudioState {
  if (state.projectId === null) throw new NoProjectError();
  const probe = state.spec.lights[index];
  if (!probe) throw new RangeError(`no probe at index ${index}`);
  const c = clampPosition(position, bounds);
  const lights = state.spec.lights.map((p, i) => (i === index ? { ...p, position: c.pos } : p));
  return withSpec(state, { ...state.spec, lights }, c.clamped);
}

export function removeProbe(state: StudioState, index: number): StudioState {
  if (state.projectId === null) throw new NoProjectError();
  if (!state.spec.lights[index]) throw new RangeError(`no probe at index ${index}`);
  const lights = state.spec.lights.filter((_, i) => i !== index);
  return withSpec(state, { ...state.spec, lights });
}

export function setRoughness(state: StudioState, roughness: number): StudioState {
  return withSpec(state, { ...state.spec, roughness });
}

/** Record a preview response; freshens only if it matches the latest spec. */
export function applyPreview(state: StudioState, revision: number, url: string): StudioState {
  if (revision !== state.specRevision) {
    return state; // response for an outdated spec: preview stays stale
  }
  return { ...state, previewUrl: url, previewRevision: revision, previewStale: false };
}

export function canSubmit(state: StudioState): boolean {
  return state.projectId !== null && !state.previewStale;
}

/** Guard used by the submit action; the spec snapshot it returns is what the
 * relight request must carry, so the result provably matches the preview. */
export function submitSnapshot(state: StudioState): { specJson: string; revision: number } {
  if (state.projectId === null) throw new NoProjectError();
  if (state.previewStale) throw new StalePreviewError();
  return { specJson: serializeSpec(state.spec), revision: state.specRevision };
}

export function upsertJob(state: StudioState, job: JobView): StudioState {
  const existing = state.jobs.findIndex((j) => j.id === job.id);
  const jobs =
    existing >= 0 ? state.jobs.map((j, i) => (i === existing ? job : j)) : [...state.jobs, job];
  return { ...state, jobs };
}

export function addResult(state: StudioState, result: ResultView): StudioState {
  return { ...state, results: [...state.results, result] };
}

export function setCompare(state: StudioState, resultId: string | null): StudioState {
  if (resultId !== null && !state.results.some((r) => r.id === resultId)) {
    throw new RangeError(`unknown result ${resultId}`);
  }
  return { ...state, compareResult: resultId };
}

export function setWipe(state: StudioState, position: number): StudioState {
  return { ...state, wipePosition: Math.min(Math.max(position, 0), 1) };
}
