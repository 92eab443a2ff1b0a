import type { CasePayload, Decision, QueuePayload, ScopePayload } from "./types.js";

/** Single runtime configuration point: set window.CRPAML_API_BASE before load. */
function base(): string {
  const candidate = (globalThis as { CRPAML_API_BASE?: unknown }).CRPAML_API_BASE;
  return typeof candidate === "string" ? candidate : "";
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(`${base()}${path}`, init);
  if (!response.ok) {
    const body = (await response.json().catch(() => ({}))) as { error?: string };
    throw new ApiError(response.status, body.error ?? response.statusText);
  }
  return (await response.json()) as T;
}

export const api = {
  queue(tau: number | null): Promise<QueuePayload> {
    const suffix = tau === null ? "" : `?tau=${encodeURIComponent(tau)}`;
    return request<QueuePayload>(`/cases${suffix}`);
  },
  caseDetail(caseId: string): Promise<CasePayload> {
    return request<CasePayload>(`/cases/${encodeURIComponent(caseId)}`);
  },
  caseScope(caseId: string): Promise<ScopePayload> {
    return request<ScopePayload>(`/cases/${encodeURIComponent(caseId)}/scope`);
  },
  decide(caseId: string, decision: Decision, note: string): Promise<CasePayload> {
    return request<CasePayload>(`/cases/${encodeURIComponent(caseId)}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ decision, note }),
    });
  },
};
