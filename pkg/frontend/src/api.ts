/** Thin typed client for the relighting service REST API.
 *
 * Every UI action maps to one documented endpoint; no state is kept here.
 * `fetch` and `sleep` are injectable for testing.
 */

import { JobView } from "./state.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;
export type Sleep = (ms: number) => Promise<void>;

export interface ProjectInfo {
  id: string;
  prompt: string;
  width: number;
  height: number;
  depth_blob?: string;
  light_spec_history: { spec: unknown; canonical: string; preview_blob: string }[];
  results: string[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

async function check(r: Response): Promise<Response> {
  if (!r.ok) {
    throw new ApiError(r.status, `${r.status}: ${await r.text()}`);
  }
  return r;
}

export class StudioClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init)
  ) {}

  async getProject(id: string): Promise<ProjectInfo> {
    const r = await check(await this.fetchImpl(`${this.baseUrl}/projects/${id}`));
    return (await r.json()) as ProjectInfo;
  }

  /** POST the spec; returns an object URL for the preview PNG. */
  async preview(projectId: string, specJson: string): Promise<string> {
    const r = await check(
      await this.fetchImpl(`${this.baseUrl}/projects/${projectId}/preview`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: `{"light_spec":${specJson}}`,
      })
    );
    const blob = await r.blob();
    return URL.createObjectURL(blob);
  }

  /** Fetch the server's stored copy of the latest spec, as raw JSON. */
  async fetchStoredSpec(projectId: string): Promise<unknown> {
    const info = await this.getProject(projectId);
    const history = info.light_spec_history;
    if (!history.length) throw new Error("no spec stored yet");
    return history[history.length - 1].spec;
  }

  async relight(
    projectId: string,
    specJson: string,
    guidance: Record<string, unknown> = {}
  ): Promise<JobView> {
    const r = await check(
      await this.fetchImpl(`${this.baseUrl}/projects/${projectId}/relight`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: `{"light_spec":${specJson},"guidance":${JSON.stringify(guidance)}}`,
      })
    );
    return (await r.json()) as JobView;
  }

  async getJob(id: string): Promise<JobView> {
    const r = await check(await this.fetchImpl(`${this.baseUrl}/jobs/${id}`));
    return (await r.json()) as JobView;
  }

  /** Poll until the job reaches a terminal state; reports progress on the way. */
  async pollJob(
    id: string,
    onUpdate: (job: JobView) => void = () => {},
    intervalMs = 500,
    sleep: Sleep = (ms) => new Promise((res) => setTimeout(res, ms))
  ): Promise<JobView> {
    for (;;) {
      const job = await this.getJob(id);
      onUpdate(job);
      if (job.state === "done" || job.state === "failed") {
        return job;
      }
      await sleep(intervalMs);
    }
  }

  resultUrl(resultId: string): string {
    return `${this.baseUrl}/results/${resultId}`;
  }
}
