// Thin typed client over the gateway HTTP API.

import type {
  JournalEntry,
  ModelDoc,
  PatchUpload,
  RegionRow,
  ReportDoc,
  SessionInfo,
  StateDoc,
  TicketDoc,
  VerdictDoc,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: { error?: string; detail?: string },
  ) {
    super(`${status}: ${body.error ?? "error"} ${body.detail ?? ""}`.trim());
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  const text = await response.text();
  let body: unknown = {};
  try {
    body = text ? JSON.parse(text) : {};
  } catch {
    body = { error: "BadResponse", detail: text.slice(0, 200) };
  }
  if (!response.ok) {
    throw new ApiError(response.status, body as { error?: string; detail?: string });
  }
  return body as T;
}

export class GatewayClient {
  constructor(public baseUrl: string) {}

  private get<T>(path: string): Promise<T> {
    return request<T>(`${this.baseUrl}${path}`);
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return request<T>(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body ?? {}),
    });
  }

  session(): Promise<SessionInfo> {
    return this.get("/api/session");
  }

  model(): Promise<ModelDoc> {
    return this.get("/api/model");
  }

  regions(): Promise<RegionRow[]> {
    return this.get("/api/regions");
  }

  state(): Promise<StateDoc> {
    return this.get("/api/state");
  }

  journal(fromSeq = 0): Promise<JournalEntry[]> {
    return this.get(`/api/journal?from=${fromSeq}`);
  }

  report(): Promise<ReportDoc> {
    return this.get("/api/report");
  }

  ticket(): Promise<TicketDoc> {
    return this.get("/api/repair/ticket");
  }

  run(): Promise<ReportDoc> {
    return this.post("/api/run", {});
  }

  step(n = 1): Promise<{ stepped: number; mode: string }> {
    return this.post("/api/step", { n });
  }

  injectFault(body: {
    task: string;
    attempt: number;
    kind: string;
    message: string;
    participant?: string;
  }): Promise<unknown> {
    return this.post("/api/fault", body);
  }

  submitPatch(patch: PatchUpload): Promise<VerdictDoc> {
    return this.post("/api/repair/patch", patch);
  }

  resume(): Promise<ReportDoc> {
    return this.post("/api/resume", {});
  }
}
