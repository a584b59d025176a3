/** Typed client for the annotation service HTTP API. */

export interface BoxPayload {
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
}

export interface ProgressPayload {
  answered: number;
  pending: number;
  step: number;
}

export interface QueryPayload {
  query_id: string;
  image: string; // base64 PPM
  box: BoxPayload;
  point: { x: number; y: number };
  category: string;
  progress: ProgressPayload;
}

export interface MetricsPayload {
  rows: Record<string, number>[];
  finished?: boolean;
  error?: string;
}

export type QueryResult =
  | { kind: "query"; query: QueryPayload }
  | { kind: "batch_done" } // 204: training about to start or run finished
  | { kind: "training" }; // 409: fine-tuning in progress

export class ServiceError extends Error {
  constructor(public status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class AnnotationClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    return this.fetchFn(`${this.baseUrl}${path}`, init);
  }

  async health(): Promise<boolean> {
    try {
      const r = await this.request("/healthz");
      return r.ok;
    } catch {
      return false;
    }
  }

  async createSession(body: {
    data_dir: string;
    run_dir?: string;
    config: Record<string, unknown>;
    idempotency_key?: string;
  }): Promise<string> {
    const r = await this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ annotator: "human", ...body }),
    });
    if (!r.ok) throw new ServiceError(r.status, await r.text());
    const payload = (await r.json()) as { session_id: string };
    return payload.session_id;
  }

  async nextQuery(sessionId: string): Promise<QueryResult> {
    const r = await this.request(`/sessions/${sessionId}/query`);
    if (r.status === 204) return { kind: "batch_done" };
    if (r.status === 409) return { kind: "training" };
    if (!r.ok) throw new ServiceError(r.status, await r.text());
    return { kind: "query", query: (await r.json()) as QueryPayload };
  }

  async answer(sessionId: string, queryId: string, label: 0 | 1): Promise<ProgressPayload> {
    const r = await this.request(`/sessions/${sessionId}/answer`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ query_id: queryId, label }),
    });
    if (!r.ok) throw new ServiceError(r.status, await r.text());
    return (await r.json()) as ProgressPayload;
  }

  async metrics(sessionId: string): Promise<MetricsPayload> {
    const r = await this.request(`/sessions/${sessionId}/metrics`);
    if (!r.ok) throw new ServiceError(r.status, await r.text());
    return (await r.json()) as MetricsPayload;
  }
}
