import type { CaseDetail, CaseSummary, ScopedView } from "./types.js";

/** Queue state: cases stay exactly in server order, tau shown = tau sent. */
export interface QueueViewModel {
  tau: number | null;
  cases: CaseSummary[];
  loading: boolean;
  error: string | null;
}

export function queueLoading(tau: number | null): QueueViewModel {
  return { tau, cases: [], loading: true, error: null };
}

export function queueLoaded(tau: number | null, cases: CaseSummary[]): QueueViewModel {
  return { tau, cases: [...cases], loading: false, error: null };
}

export function queueFailed(tau: number | null, message: string): QueueViewModel {
  return { tau, cases: [], loading: false, error: message };
}

export interface DecisionForm {
  locked: boolean;
  submitting: boolean;
  conflict: boolean;
  error: string | null;
}

export interface CaseViewModel {
  detail: CaseDetail;
  scope: ScopedView | null;
  form: DecisionForm;
}

export function caseLoaded(detail: CaseDetail, scope: ScopedView | null): CaseViewModel {
  return {
    detail,
    scope,
    form: {
      locked: detail.status !== "open",
      submitting: false,
      conflict: false,
      error: null,
    },
  };
}

export function decisionPending(vm: CaseViewModel): CaseViewModel {
  // no optimistic update: the detail stays untouched until the server confirms
  return { ...vm, form: { ...vm.form, submitting: true, error: null } };
}

export function decisionRecorded(vm: CaseViewModel, detail: CaseDetail): CaseViewModel {
  return {
    detail,
    scope: vm.scope,
    form: { locked: true, submitting: false, conflict: false, error: null },
  };
}

/** 409: show the freshly fetched already-decided state under a conflict banner. */
export function decisionConflict(vm: CaseViewModel, fresh: CaseDetail): CaseViewModel {
  return {
    detail: fresh,
    scope: vm.scope,
    form: { locked: true, submitting: false, conflict: true, error: null },
  };
}

export function decisionRejected(vm: CaseViewModel, message: string): CaseViewModel {
  return { ...vm, form: { ...vm.form, submitting: false, error: message } };
}

export interface RiskBar {
  name: string;
  value: number;
  /** magnitude relative to the largest |contribution|, for bar widths */
  weight: number;
}

/** The five per-indicator log-odds terms; they sum to the composite. */
export function riskBars(contributions: Record<string, number>): RiskBar[] {
  const entries = Object.entries(contributions);
  const peak = Math.max(1e-12, ...entries.map(([, v]) => Math.abs(v)));
  return entries.map(([name, value]) => ({ name, value, weight: Math.abs(value) / peak }));
}

export function contributionsTotal(contributions: Record<string, number>): number {
  return Object.values(contributions).reduce((total, v) => total + v, 0);
}
