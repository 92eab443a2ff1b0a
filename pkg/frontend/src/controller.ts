import { api, ApiError } from "./api.js";
import {
  caseLoaded,
  decisionConflict,
  decisionPending,
  decisionRecorded,
  decisionRejected,
  queueFailed,
  queueLoaded,
  queueLoading,
  type CaseViewModel,
  type QueueViewModel,
} from "./state.js";
import { renderCase, renderQueue } from "./render.js";
import type { Decision } from "./types.js";

/**
 * All console state derives from API responses; a reload reconstructs it
 * from scratch. Decisions never update the view until the server answers.
 */
export class Console {
  queue: QueueViewModel = queueLoading(null);
  current: CaseViewModel | null = null;

  constructor(private readonly root: HTMLElement) {}

  async loadQueue(tau: number | null): Promise<void> {
    this.current = null;
    this.queue = queueLoading(tau);
    this.paint();
    try {
      const payload = await api.queue(tau);
      this.queue = queueLoaded(payload.tau, payload.cases);
    } catch (error) {
      this.queue = queueFailed(tau, describe(error));
    }
    this.paint();
  }

  async openCase(caseId: string): Promise<void> {
    try {
      const detail = await api.caseDetail(caseId);
      const scope = await api.caseScope(caseId).catch(() => null);
      this.current = caseLoaded(detail.case, scope ? scope.scope : null);
    } catch (error) {
      this.queue = queueFailed(this.queue.tau, describe(error));
      this.current = null;
    }
    this.paint();
  }

  async decide(decision: Decision, note: string): Promise<void> {
    if (this.current === null || this.current.form.locked) {
      return;
    }
    const caseId = this.current.detail.case_id;
    this.current = decisionPending(this.current);
    this.paint();
    try {
      const payload = await api.decide(caseId, decision, note);
      this.current = decisionRecorded(this.current, payload.case);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        // fetch the recorded decision fresh; render it under a conflict banner
        const fresh = await api.caseDetail(caseId);
        this.current = decisionConflict(this.current, fresh.case);
      } else {
        this.current = decisionRejected(this.current, describe(error));
      }
    }
    this.paint();
  }

  paint(): void {
    if (this.current !== null) {
      renderCase(this.root, this.current, {
        onDecide: (decision, note) => void this.decide(decision, note),
        onBack: () => void this.loadQueue(this.queue.tau),
      });
      return;
    }
    renderQueue(this.root, this.queue, {
      onSelect: (caseId) => void this.openCase(caseId),
      onTauChange: (tau) => void this.loadQueue(tau),
      onRetry: () => void this.loadQueue(this.queue.tau),
    });
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    return `request failed (${error.status}): ${error.message}`;
  }
  return error instanceof Error ? error.message : String(error);
}
