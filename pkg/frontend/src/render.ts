import type { CaseViewModel, QueueViewModel } from "./state.js";
import { contributionsTotal, riskBars } from "./state.js";
import type { ScopedView } from "./types.js";

export interface QueueHandlers {
  onSelect(caseId: string): void;
  onTauChange(tau: number | null): void;
  onRetry(): void;
}

export interface CaseHandlers {
  onDecide(decision: "confirmed" | "dismissed", note: string): void;
  onBack(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function statusBadge(status: string): HTMLElement {
  return el("span", { class: `badge badge-${status}`, "data-testid": "status-badge" }, status);
}

export function renderQueue(
  container: HTMLElement,
  vm: QueueViewModel,
  handlers: QueueHandlers,
): void {
  container.replaceChildren();
  const panel = el("section", { class: "queue-panel" });
  panel.append(el("h2", {}, "Flagged cases"));

  const tauRow = el("div", { class: "tau-row" });
  tauRow.append(el("label", { for: "tau-slider" }, "risk threshold τ"));
  const slider = el("input", {
    id: "tau-slider",
    type: "range",
    min: "-10",
    max: "10",
    step: "0.5",
    value: vm.tau === null ? "-10" : String(vm.tau),
    "data-testid": "tau-slider",
  });
  slider.addEventListener("change", () => {
    const raw = Number(slider.value);
    handlers.onTauChange(raw <= -10 ? null : raw);
  });
  const tauLabel = el(
    "span",
    { "data-testid": "tau-value" },
    vm.tau === null ? "off" : vm.tau.toFixed(2),
  );
  tauRow.append(slider, tauLabel);
  panel.append(tauRow);

  if (vm.error !== null) {
    const banner = el("div", { class: "banner banner-error", "data-testid": "error-banner" });
    banner.append(el("span", {}, vm.error));
    const retry = el("button", { "data-testid": "retry" }, "retry");
    retry.addEventListener("click", handlers.onRetry);
    banner.append(retry);
    panel.append(banner);
    container.append(panel);
    return;
  }
  if (vm.loading) {
    panel.append(el("p", { "data-testid": "loading" }, "loading…"));
    container.append(panel);
    return;
  }
  if (vm.cases.length === 0) {
    panel.append(el("p", { "data-testid": "empty-queue" }, "no open cases"));
    container.append(panel);
    return;
  }

  const table = el("table", { class: "queue", "data-testid": "queue-table" });
  const head = el("tr");
  for (const column of ["case", "p̂", "composite risk", "status"]) {
    head.append(el("th", {}, column));
  }
  table.append(head);
  for (const summary of vm.cases) {
    const row = el("tr", { class: "queue-row", "data-case-id": summary.case_id });
    const link = el("a", { href: `#/cases/${summary.case_id}` }, summary.case_id);
    link.addEventListener("click", (event) => {
      event.preventDefault();
      handlers.onSelect(summary.case_id);
    });
    const caseCell = el("td");
    caseCell.append(link);
    row.append(
      caseCell,
      el("td", {}, summary.p_hat.toFixed(4)),
      el("td", {}, summary.composite.toFixed(3)),
    );
    const statusCell = el("td");
    statusCell.append(statusBadge(summary.status));
    row.append(statusCell);
    table.append(row);
  }
  panel.append(table);
  container.append(panel);
}

function renderScope(scope: ScopedView): HTMLElement {
  const section = el("section", { class: "scope", "data-testid": "scope" });
  const suspect = el("div", { class: "suspect-panel" });
  suspect.append(el("h3", {}, "suspect"));
  suspect.append(el("code", { "data-testid": "suspect-token" }, scope.suspect));
  const profile = el("dl");
  for (const [key, value] of Object.entries(scope.suspect_profile)) {
    profile.append(el("dt", {}, key), el("dd", {}, String(value)));
  }
  suspect.append(profile);
  section.append(suspect);

  const partners = el("div", { class: "counterparties" });
  partners.append(el("h3", {}, "substantial counterparties"));
  const list = el("ul", { "data-testid": "counterparty-list" });
  for (const entry of scope.counterparties) {
    const item = el("li");
    item.append(el("code", {}, entry.account));
    item.append(el("span", {}, ` ${(entry.share * 100).toFixed(1)}% of volume`));
    list.append(item);
  }
  for (const entry of scope.pseudonymous_counterparties) {
    const item = el("li", { class: "pseudonymous" });
    item.append(el("code", {}, entry.token));
    item.append(el("span", {}, ` ${(entry.share * 100).toFixed(1)}% of volume (below threshold)`));
    list.append(item);
  }
  partners.append(list);
  section.append(partners);

  const txns = el("div", { class: "scoped-transactions" });
  txns.append(el("h3", {}, "scoped transactions"));
  const table = el("table", { "data-testid": "scope-transactions" });
  const head = el("tr");
  for (const column of ["time", "direction", "counterparty", "USD", "currency", "format"]) {
    head.append(el("th", {}, column));
  }
  table.append(head);
  for (const txn of scope.transactions) {
    const row = el("tr");
    row.append(
      el("td", {}, new Date(txn.timestamp * 1000).toISOString()),
      el("td", {}, txn.direction),
      el("td", {}, txn.counterparty),
      el("td", {}, txn.amount_usd.toFixed(2)),
      el("td", {}, txn.currency),
      el("td", {}, txn.format),
    );
    table.append(row);
  }
  txns.append(table);
  section.append(txns);
  return section;
}

export function renderCase(
  container: HTMLElement,
  vm: CaseViewModel,
  handlers: CaseHandlers,
): void {
  container.replaceChildren();
  const panel = el("section", { class: "case-panel", "data-case-id": vm.detail.case_id });

  const back = el("button", { "data-testid": "back" }, "← queue");
  back.addEventListener("click", handlers.onBack);
  panel.append(back);

  const header = el("div", { class: "case-header" });
  header.append(el("h2", {}, vm.detail.case_id));
  header.append(statusBadge(vm.detail.status));
  panel.append(header);

  if (vm.form.conflict) {
    panel.append(
      el(
        "div",
        { class: "banner banner-conflict", "data-testid": "conflict-banner" },
        "another investigator already decided this case; showing the recorded decision",
      ),
    );
  }
  if (vm.form.error !== null) {
    panel.append(
      el("div", { class: "banner banner-error", "data-testid": "form-error" }, vm.form.error),
    );
  }

  const facts = el("dl", { class: "case-facts" });
  facts.append(el("dt", {}, "probability"), el("dd", {}, vm.detail.p_hat.toFixed(4)));
  facts.append(
    el("dt", {}, "composite risk"),
    el("dd", { "data-testid": "composite" }, vm.detail.composite.toFixed(3)),
  );
  if (vm.detail.note) {
    facts.append(el("dt", {}, "note"), el("dd", { "data-testid": "note" }, vm.detail.note));
  }
  panel.append(facts);

  // per-indicator log-odds bars; their sum is shown against the composite
  const bars = el("div", { class: "risk-bars", "data-testid": "risk-bars" });
  bars.append(el("h3", {}, "risk explanation"));
  for (const bar of riskBars(vm.detail.contributions)) {
    const row = el("div", { class: "risk-bar-row" });
    row.append(el("span", { class: "risk-name" }, bar.name));
    const track = el("div", { class: "risk-track" });
    const fill = el("div", {
      class: `risk-fill ${bar.value >= 0 ? "pos" : "neg"}`,
      style: `width: ${Math.round(bar.weight * 100)}%`,
    });
    track.append(fill);
    row.append(track);
    row.append(el("span", { class: "risk-value" }, bar.value.toFixed(3)));
    bars.append(row);
  }
  bars.append(
    el(
      "div",
      { class: "risk-total", "data-testid": "risk-total" },
      `sum ${contributionsTotal(vm.detail.contributions).toFixed(3)}`,
    ),
  );
  panel.append(bars);

  if (vm.scope !== null) {
    panel.append(renderScope(vm.scope));
  }

  const form = el("div", { class: "decision-form", "data-testid": "decision-form" });
  const note = el("textarea", {
    placeholder: "decision note",
    "data-testid": "note-input",
  }) as HTMLTextAreaElement;
  const disabled = vm.form.locked || vm.form.submitting;
  const confirm = el("button", { "data-testid": "confirm" }, "confirm laundering");
  const dismiss = el("button", { "data-testid": "dismiss" }, "dismiss");
  confirm.disabled = disabled;
  dismiss.disabled = disabled;
  note.disabled = disabled;
  confirm.addEventListener("click", () => handlers.onDecide("confirmed", note.value));
  dismiss.addEventListener("click", () => handlers.onDecide("dismissed", note.value));
  form.append(note, confirm, dismiss);
  panel.append(form);

  container.append(panel);
}
