/** Typed client for the debugging service. Every mutating UI interaction maps
 * to exactly one of these calls; the UI holds no authoritative state. */

export interface SessionView {
  id: string;
  state: "idle" | "training" | "awaiting_feedback" | "stable";
  round: number;
  trained: boolean;
  epochs: number;
  classes: number;
  concepts: number;
  confounded_class: number;
  feedback_count: number;
  image_ids: string[];
  last_error: string | null;
}

export interface Representative {
  image_id: string;
  location: [number, number];
  activation: number;
  image_ppm: string;
  attribution_pgm: string;
  attribution_total: number;
}

export interface ConceptPacket {
  concept: number;
  owner_class: number;
  prototype_ppm: string;
  weights: number[];
  kappa_row: number[];
  representatives: Representative[];
}

export interface MetricsRecord {
  epoch: number;
  phase: string;
  train_loss: number;
  train_accuracy: number;
  test_accuracy: number;
  terms: Record<string, number>;
  confound_reliance: number;
}

export interface MetricsPage {
  records: MetricsRecord[];
  state: SessionView["state"];
  round: number;
}

export type FeedbackBody =
  | { kind: "mark_irrelevant"; concept: number;
      scope: { kind: "instance" | "class" | "global"; x_id?: string; y?: number } }
  | { kind: "concept_label"; concept: number; image_id: string; desired: 0 | 1 }
  | { kind: "concept_region"; concept: number; image_id: string;
      region: { shape: [number, number]; bits: string } }
  | { kind: "mark_relevant"; concept: number; class_index: number };

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function unwrap<T>(resp: Response): Promise<T> {
  const body = await resp.json();
  if (!body.ok) {
    throw new ApiError(resp.status, body.error?.code ?? "unknown",
                       body.error?.message ?? resp.statusText);
  }
  return body.data as T;
}

export class Client {
  constructor(public baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async createSession(dataset: string, config?: unknown): Promise<SessionView> {
    const resp = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ dataset, config }),
    });
    return unwrap<SessionView>(resp);
  }

  async getSession(id: string): Promise<SessionView> {
    return unwrap<SessionView>(await fetch(this.url(`/sessions/${id}`)));
  }

  async getConcepts(id: string): Promise<{ packets: ConceptPacket[] }> {
    return unwrap(await fetch(this.url(`/sessions/${id}/concepts`)));
  }

  async getExplanation(id: string, image: string, clazz: number): Promise<{
    image: string; class: number; pairs: [number, number][]; score: number;
  }> {
    const params = new URLSearchParams({ image, class: String(clazz) });
    return unwrap(await fetch(this.url(`/sessions/${id}/explanations?${params}`)));
  }

  async submitFeedback(id: string, body: FeedbackBody):
      Promise<{ feedback_count: number; state: SessionView["state"] }> {
    const resp = await fetch(this.url(`/sessions/${id}/feedback`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return unwrap(resp);
  }

  async startRound(id: string): Promise<{ state: string; round: number }> {
    const resp = await fetch(this.url(`/sessions/${id}/rounds`), { method: "POST" });
    return unwrap(resp);
  }

  async getMetrics(id: string, since: number): Promise<MetricsPage> {
    return unwrap(await fetch(this.url(`/sessions/${id}/metrics?since=${since}`)));
  }
}
