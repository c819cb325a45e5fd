/** Debounced, coalescing preview requests: at most one outstanding request.
 *
 * Rapid edits reset the debounce timer, so only the final spec is rendered.
 * If an edit lands while a request is in flight, it is queued (replacing any
 * previously queued spec) and sent when the outstanding request settles.
 * Responses carry the revision they were requested for, so the caller can
 * ignore replies that no longer match the displayed spec.
 */

export interface PreviewRequest {
  specJson: string;
  revision: number;
}

export type SendPreview = (req: PreviewRequest) => Promise<string>;
export type OnPreview = (revision: number, url: string) => void;
export type OnError = (revision: number, error: unknown) => void;

export interface SchedulerTimers {
  set(fn: () => void, ms: number): unknown;
  clear(handle: unknown): void;
}

const realTimers: SchedulerTimers = {
  set: (fn, ms) => setTimeout(fn, ms),
  clear: (h) => clearTimeout(h as ReturnType<typeof setTimeout>),
};

export class PreviewScheduler {
  private timer: unknown = null;
  private pending: PreviewRequest | null = null;
  private queued: PreviewRequest | null = null;
  private outstanding = false;

  constructor(
    private send: SendPreview,
    private onPreview: OnPreview,
    private onError: OnError = () => {},
    private debounceMs = 150,
    private timers: SchedulerTimers = realTimers
  ) {}

  /** Called on every spec edit. */
  schedule(req: PreviewRequest): void {
    this.pending = req;
    if (this.timer !== null) {
      this.timers.clear(this.timer);
    }
    this.timer = this.timers.set(() => {
      this.timer = null;
      this.flush();
    }, this.debounceMs);
  }

  get hasOutstanding(): boolean {
    return this.outstanding;
  }

  private flush(): void {
    if (this.pending === null) return;
    const req = this.pending;
    this.pending = null;
    if (this.outstanding) {
      this.queued = req; // coalesce: only the latest spec survives
      return;
    }
    this.dispatch(req);
  }

  private dispatch(req: PreviewRequest): void {
    this.outstanding = true;
    this.send(req).then(
      (url) => this.settle(() => this.onPreview(req.revision, url)),
      (err) => this.settle(() => this.onError(req.revision, err))
    );
  }

  private settle(deliver: () => void): void {
    this.outstanding = false;
    deliver();
    if (this.queued !== null) {
      const next = this.queued;
      this.queued = null;
      this.dispatch(next);
    }
  }
}
