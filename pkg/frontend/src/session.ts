import { AnnotationClient, QueryPayload, ServiceError } from "./client.js";

export type UiState =
  | { phase: "idle" }
  | { phase: "loading" }
  | { phase: "query"; query: QueryPayload }
  | { phase: "training" }
  | { phase: "finished" }
  | { phase: "error"; message: string };

export interface SessionEvents {
  onState?: (state: UiState) => void;
  onMetrics?: (rows: Record<string, number>[]) => void;
}

/**
 * Drives one annotation session: polls for queries, submits answers, and
 * guards against duplicate submissions. All service interaction goes through
 * this class so the DOM layer stays free of protocol logic.
 */
export class SessionController {
  state: UiState = { phase: "idle" };
  private answered = new Set<string>();
  private inFlight: string | null = null;
  private stopped = false;

  constructor(
    private client: AnnotationClient,
    private sessionId: string,
    private events: SessionEvents = {},
    private pollDelayMs = 250,
  ) {}

  private setState(s: UiState): void {
    this.state = s;
    this.events.onState?.(s);
  }

  stop(): void {
    this.stopped = true;
  }

  /** Poll until a query is available or the run finishes. */
  async pollLoop(): Promise<void> {
    while (!this.stopped) {
      try {
        const metrics = await this.client.metrics(this.sessionId);
        this.events.onMetrics?.(metrics.rows);
        if (metrics.error) {
          this.setState({ phase: "error", message: metrics.error });
          return;
        }
        if (metrics.finished) {
          this.setState({ phase: "finished" });
          return;
        }
        const result = await this.client.nextQuery(this.sessionId);
        if (result.kind === "query") {
          this.setState({ phase: "query", query: result.query });
          return;
        }
        this.setState({ phase: "training" });
      } catch (e) {
        // network failure: surface a retry banner, keep polling
        this.setState({ phase: "error", message: e instanceof Error ? e.message : String(e) });
      }
      await sleep(this.pollDelayMs);
    }
  }

  /**
   * Submit the current query's label. Exactly one request is ever sent per
   * query_id: duplicate calls (double-clicks, key repeats) are dropped both
   * while a request is in flight and after it resolves.
   */
  async submit(label: 0 | 1): Promise<boolean> {
    if (this.state.phase !== "query") return false;
    const queryId = this.state.query.query_id;
    if (this.answered.has(queryId) || this.inFlight === queryId) return false;
    this.inFlight = queryId;
    try {
      await this.client.answer(this.sessionId, queryId, label);
      this.answered.add(queryId);
    } catch (e) {
      if (e instanceof ServiceError && e.status === 409) {
        // someone else answered it; treat as done
        this.answered.add(queryId);
      } else {
        this.inFlight = null;
        this.setState({ phase: "error", message: e instanceof Error ? e.message : String(e) });
        return false;
      }
    }
    this.inFlight = null;
    this.setState({ phase: "loading" });
    await this.pollLoop();
    return true;
  }

  /** Keyboard protocol: Y answers yes (1), N answers no (0). */
  async handleKey(key: string): Promise<boolean> {
    const k = key.toLowerCase();
    if (k === "y") return this.submit(1);
    if (k === "n") return this.submit(0);
    return false;
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
