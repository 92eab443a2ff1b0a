export type CaseStatus = "open" | "confirmed" | "dismissed";

export interface Meta {
  model_checkpoint: string;
  schema_version: string;
}

export interface CaseSummary {
  case_id: string;
  transaction: number;
  p_hat: number;
  composite: number;
  status: CaseStatus;
}

export interface QueuePayload {
  tau: number | null;
  cases: CaseSummary[];
  meta: Meta;
}

export interface CaseDetail extends CaseSummary {
  contributions: Record<string, number>;
  note: string;
  decided_at: number | null;
}

export interface CasePayload {
  case: CaseDetail;
  meta: Meta;
}

export interface ScopeTransaction {
  timestamp: number;
  direction: "in" | "out";
  counterparty: string;
  amount_usd: number;
  currency: string;
  format: string;
}

export interface CounterpartyEntry {
  account: string;
  volume_usd: number;
  share: number;
  profile: Record<string, unknown> | null;
}

export interface PseudonymousEntry {
  token: string;
  volume_usd: number;
  share: number;
}

export interface ScopedView {
  suspect: string;
  suspect_profile: Record<string, unknown>;
  transactions: ScopeTransaction[];
  counterparties: CounterpartyEntry[];
  pseudonymous_counterparties: PseudonymousEntry[];
}

export interface ScopePayload {
  scope: ScopedView;
  case_id: string;
  meta: Meta;
}

export type Decision = "confirmed" | "dismissed";
