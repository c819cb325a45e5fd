/** Minimal DOM wiring: canvas probe editing, live preview, job panel, A/B wipe. */

import { StudioClient } from "./api.js";
import { PreviewScheduler } from "./preview.js";
import { serializeSpec, SceneBounds, Vec3 } from "./spec.js";
import {
  StudioState,
  addProbe,
  addResult,
  applyPreview,
  canSubmit,
  initialState,
  loadProject,
  moveProbe,
  removeProbe,
  setCompare,
  setWipe,
  submitSnapshot,
  upsertJob,
} from "./state.js";

export class Studio {
  state: StudioState = initialState();
  private bounds: SceneBounds = { width: 64, height: 64, maxDepth: 64 };
  private scheduler: PreviewScheduler;

  constructor(
    private client: StudioClient,
    private render: (state: StudioState) => void
  ) {
    this.scheduler = new PreviewScheduler(
      (req) => this.client.preview(this.state.projectId!, req.specJson),
      (revision, url) => this.update(applyPreview(this.state, revision, url)),
      (_revision, err) => console.error("preview failed", err)
    );
  }

  private update(next: StudioState): void {
    this.state = next;
    this.render(next);
  }

  private edited(next: StudioState): void {
    this.update(next);
    this.scheduler.schedule({
      specJson: serializeSpec(next.spec),
      revision: next.specRevision,
    });
  }

  async open(projectId: string): Promise<void> {
    const info = await this.client.getProject(projectId);
    this.bounds = { width: info.width, height: info.height, maxDepth: info.width };
    this.update(loadProject(this.state, projectId));
  }

  addPointLight(position: Vec3, intensity: number): void {
    this.edited(addProbe(this.state, { kind: "point", position, intensity }, this.bounds));
  }

  dragProbe(index: number, position: Vec3): void {
    this.edited(moveProbe(this.state, index, position, this.bounds));
  }

  deleteProbe(index: number): void {
    this.edited(removeProbe(this.state, index));
  }

  async submit(): Promise<void> {
    const snapshot = submitSnapshot(this.state); // throws StalePreviewError when stale
    const job = await this.client.relight(this.state.projectId!, snapshot.specJson);
    this.update(upsertJob(this.state, job));
    const final = await this.client.pollJob(job.id, (j) => this.update(upsertJob(this.state, j)));
    if (final.state === "done" && final.result) {
      this.update(
        setCompare(
          addResult(this.state, { id: final.result, specJson: snapshot.specJson }),
          final.result
        )
      );
    }
  }

  get submitEnabled(): boolean {
    return canSubmit(this.state);
  }

  wipe(position: number): void {
    this.update(setWipe(this.state, position));
  }
}

export function mount(root: HTMLElement, baseUrl = ""): Studio {
  root.innerHTML = `
    <div class="studio">
      <canvas id="scene" width="512" height="512"></canvas>
      <img id="preview" alt="light preview" />
      <span id="stale" hidden>preview out of date</span>
      <button id="submit">Relight</button>
      <input id="wipe" type="range" min="0" max="100" value="50" />
      <div id="compare"></div>
      <ul id="jobs"></ul>
    </div>`;
  const canvas = root.querySelector<HTMLCanvasElement>("#scene")!;
  const preview = root.querySelector<HTMLImageElement>("#preview")!;
  const stale = root.querySelector<HTMLElement>("#stale")!;
  const submit = root.querySelector<HTMLButtonElement>("#submit")!;
  const wipe = root.querySelector<HTMLInputElement>("#wipe")!;
  const compare = root.querySelector<HTMLElement>("#compare")!;
  const jobs = root.querySelector<HTMLUListElement>("#jobs")!;
  const client = new StudioClient(baseUrl);

  const studio = new Studio(client, (state) => {
    if (state.previewUrl) preview.src = state.previewUrl;
    stale.hidden = !state.previewStale;
    submit.disabled = !canSubmit(state);
    jobs.innerHTML = state.jobs
      .map((j) => `<li>${j.id}: ${j.state} ${(j.progress * 100).toFixed(0)}%${j.error ? ` — ${j.error}` : ""}</li>`)
    .join("");
    if (state.compareResult) {
      compare.style.setProperty("--wipe", `${state.wipePosition * 100}%`);
      compare.dataset.result = client.resultUrl(state.compareResult);
    }
  });

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * 64;
    const y = ((ev.clientY - rect.top) / rect.height) * 64;
    // scroll-wheel while dragging adjusts depth; clicks place at mid-depth
    studio.addPointLight([x, y, 32], 3000);
  });
  submit.addEventListener("click", () => void studio.submit());
  wipe.addEventListener("input", () => studio.wipe(Number(wipe.value) / 100));
  return studio;
}
