"""Investigator case service: flagged transactions as reviewable cases over
HTTP, with least-privilege scoping of what each case exposes.

A case view never reveals account identities beyond the suspect and its
direct counterparties; counterparties below the substantial-relationship
threshold appear only as salted pseudonymous tokens, without profiles.
Decisions are single-transition and persist through an append-only log.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Iterable

from fastapi import FastAPI, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .riskmodel import INDICATORS
from .txstore import AccountId, TransactionStore, RateTable, DEFAULT_RATES, to_usd


class CaseStatus(str, Enum):
    OPEN = "open"
    CONFIRMED = "confirmed"
    DISMISSED = "dismissed"


class NotFoundError(KeyError):
    pass


class ConflictError(RuntimeError):
    pass


@dataclass
class Case:
    case_id: str
    transaction: int  # store position
    p_hat: float
    composite: float
    contributions: dict[str, float]
    status: CaseStatus = CaseStatus.OPEN
    note: str = ""
    decided_at: float | None = None

    def summary(self) -> dict:
        return {
            "case_id": self.case_id,
            "transaction": self.transaction,
            "p_hat": self.p_hat,
            "composite": self.composite,
            "status": self.status.value,
        }

    def detail(self) -> dict:
        return {
            **self.summary(),
            "contributions": self.contributions,
            "note": self.note,
            "decided_at": self.decided_at,
        }


@dataclass
class ScoredRow:
    """One scored transaction as loaded from the score stage output."""

    position: int
    p_hat: float
    raw_decision: bool
    composite: float
    final_decision: bool
    contributions: dict[str, float] = field(default_factory=dict)


def case_id_for(position: int) -> str:
    return f"case-{position:06d}"


def flag_cases(predictions: Iterable) -> list[Case]:
    """One open case per final-positive prediction, descending composite;
    duplicate transaction ids collapse into the first case seen."""
    cases: dict[int, Case] = {}
    for p in predictions:
        if not p.final_decision:
            continue
        if p.position in cases:
            continue  # duplicate rejected
        cases[p.position] = Case(
            case_id=case_id_for(p.position),
            transaction=p.position,
            p_hat=p.p_hat,
            composite=p.composite,
            contributions=dict(getattr(p, "contributions", {}) or {}),
        )
    return sorted(cases.values(), key=lambda c: (-c.composite, c.transaction))


# --- scoped views -------------------------------------------------------------


@dataclass
class ScopedView:
    suspect: str  # account token
    suspect_profile: dict
    transactions: list[dict]
    counterparties: list[dict]  # substantial: identified + profiled
    pseudonymous_counterparties: list[dict]  # below threshold: tokens only

    def to_json(self) -> dict:
        return {
            "suspect": self.suspect,
            "suspect_profile": self.suspect_profile,
            "transactions": self.transactions,
            "counterparties": self.counterparties,
            "pseudonymous_counterparties": self.pseudonymous_counterparties,
        }


def _parse_token(token: str) -> AccountId:
    bank, _, account = token.partition("/")
    return AccountId(bank, account)


def pseudonym(token: str, salt: str) -> str:
    return "ctp-" + hashlib.sha256(f"{salt}:{token}".encode()).hexdigest()[:12]


def scoped_view(
    suspect: AccountId,
    store: TransactionStore,
    profile_summaries: dict[str, dict],
    substantial_fraction: float = 0.05,
    salt: str = "scope",
    rate_table: RateTable = DEFAULT_RATES,
) -> ScopedView:
    """The least-privilege slice for one suspect: its own transactions, the
    profiles of substantial counterparties, pseudonyms for the rest."""
    records = store.scan_account(suspect)
    volume_with: dict[AccountId, Decimal] = {}
    total = Decimal(0)
    for r in records:
        if r.sender == suspect:
            usd = to_usd(r.amount_paid, r.payment_currency, rate_table)
            other = r.receiver
        else:
            usd = to_usd(r.amount_received, r.receiving_currency, rate_table)
            other = r.sender
        total += usd
        volume_with[other] = volume_with.get(other, Decimal(0)) + usd

    threshold = total * Decimal(str(substantial_fraction))
    substantial = {a for a, v in volume_with.items() if total > 0 and v >= threshold}
    alias = {
        a: (a.token() if a in substantial else pseudonym(a.token(), salt))
        for a in volume_with
    }

    transactions = []
    for r in records:
        out = r.sender == suspect
        other = r.receiver if out else r.sender
        usd = to_usd(r.amount_paid if out else r.amount_received,
                     r.payment_currency if out else r.receiving_currency, rate_table)
        transactions.append(
            {
                "timestamp": r.timestamp,
                "direction": "out" if out else "in",
                "counterparty": alias[other],
                "amount_usd": float(usd),
                "currency": r.payment_currency if out else r.receiving_currency,
                "format": r.payment_format.value,
            }
        )

    counterparties = []
    pseudonymous = []
    ranked = sorted(volume_with.items(), key=lambda kv: (-kv[1], kv[0]))
    for account, volume in ranked:
        share = float(volume / total) if total > 0 else 0.0
        if account in substantial:
            counterparties.append(
                {
                    "account": account.token(),
                    "volume_usd": float(volume),
                    "share": share,
                    "profile": profile_summaries.get(account.token()),
                }
            )
        else:
            pseudonymous.append(
                {"token": alias[account], "volume_usd": float(volume), "share": share}
            )

    return ScopedView(
        suspect=suspect.token(),
        suspect_profile=profile_summaries.get(suspect.token()) or {},
        transactions=transactions,
        counterparties=counterparties,
        pseudonymous_counterparties=pseudonymous,
    )


# --- case store with append-only decision log ---------------------------------


class CaseStore:
    """Raw-positive predictions become candidate cases; decisions are
    serialized through a single-writer append-only log."""

    def __init__(self, rows: list[ScoredRow], default_tau: float, log_path: Path | None = None):
        self.rows = {r.position: r for r in rows if r.raw_decision}
        self.default_tau = default_tau
        self.log_path = log_path
        self._lock = threading.Lock()
        self.decisions: dict[str, dict] = {}
        if log_path is not None and log_path.exists():
            for line in log_path.read_text().splitlines():
                if line.strip():
                    entry = json.loads(line)
                    self.decisions[entry["case_id"]] = entry

    def queue(self, tau: float | None = None) -> list[Case]:
        """Final decisions recomputed from stored (p_hat, composite) at the
        requested tau; no retraining involved."""
        tau = self.default_tau if tau is None else tau
        candidates = []
        for row in self.rows.values():
            final = not (row.composite < tau)
            candidates.append(
                ScoredRow(row.position, row.p_hat, row.raw_decision, row.composite, final,
                          row.contributions)
            )
        cases = flag_cases(candidates)
        for case in cases:
            self._apply_decision(case)
        return cases

    def get(self, case_id: str) -> Case:
        row = self.rows.get(self._position_of(case_id))
        if row is None:
            raise NotFoundError(case_id)
        case = Case(
            case_id=case_id,
            transaction=row.position,
            p_hat=row.p_hat,
            composite=row.composite,
            contributions=row.contributions,
        )
        self._apply_decision(case)
        return case

    def record_decision(self, case_id: str, decision: str, note: str) -> Case:
        if decision not in (CaseStatus.CONFIRMED.value, CaseStatus.DISMISSED.value):
            raise ValueError(f"decision must be confirmed or dismissed, got {decision!r}")
        with self._lock:
            case = self.get(case_id)  # raises NotFoundError for unknown ids
            if case.status is not CaseStatus.OPEN:
                raise ConflictError(f"case {case_id} already {case.status.value}")
            entry = {
                "case_id": case_id,
                "decision": decision,
                "note": note,
                "decided_at": time.time(),
            }
            if self.log_path is not None:
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(entry) + "\n")
            self.decisions[case_id] = entry
        return self.get(case_id)

    def _position_of(self, case_id: str) -> int:
        try:
            position = int(case_id.rsplit("-", 1)[1])
        except (IndexError, ValueError):
            return -1
        return position if case_id == case_id_for(position) else -1

    def _apply_decision(self, case: Case) -> None:
        entry = self.decisions.get(case.case_id)
        if entry is not None:
            case.status = CaseStatus(entry["decision"])
            case.note = entry["note"]
            case.decided_at = entry["decided_at"]


# --- HTTP API -----------------------------------------------------------------


def build_app(
    store: TransactionStore,
    profile_summaries: dict[str, dict],
    case_store: CaseStore,
    checkpoint_hash: str,
    schema_hash: str,
    substantial_fraction: float = 0.05,
    suspect_side: str = "sender",
    rate_table: RateTable = DEFAULT_RATES,
) -> FastAPI:
    app = FastAPI(title="crpaml case service")
    # single-role demo service; the console may be served from another origin
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    meta = {"model_checkpoint": checkpoint_hash, "schema_version": schema_hash}
    salt = checkpoint_hash or "scope"

    def envelope(payload: dict, status_code: int = 200) -> JSONResponse:
        return JSONResponse(
            {**payload, "meta": meta},
            status_code=status_code,
            headers={
                "X-Checkpoint-Hash": checkpoint_hash,
                "X-Schema-Version": schema_hash,
            },
        )

    def error(status_code: int, message: str) -> JSONResponse:
        return envelope({"error": message}, status_code)

    @app.get("/health")
    def health():
        return envelope({"status": "ok", "open_candidates": len(case_store.rows)})

    @app.get("/cases")
    def queue(tau: float | None = Query(default=None)):
        cases = case_store.queue(tau)
        effective = case_store.default_tau if tau is None else tau
        return envelope(
            {
                "tau": effective if math.isfinite(effective) else None,
                "cases": [c.summary() for c in cases],
            }
        )

    @app.get("/cases/{case_id}")
    def case_detail(case_id: str):
        try:
            case = case_store.get(case_id)
        except NotFoundError:
            return error(404, f"unknown case {case_id}")
        return envelope({"case": case.detail()})

    @app.get("/cases/{case_id}/scope")
    def case_scope(case_id: str, side: str | None = Query(default=None)):
        try:
            case = case_store.get(case_id)
        except NotFoundError:
            return error(404, f"unknown case {case_id}")
        record = store.records[case.transaction]
        chosen = side or ("sender" if suspect_side == "both" else suspect_side)
        if chosen not in ("sender", "receiver"):
            return error(400, f"side must be sender or receiver, got {chosen!r}")
        if suspect_side != "both" and chosen != suspect_side:
            return error(400, f"this deployment scopes the {suspect_side} only")
        suspect = record.sender if chosen == "sender" else record.receiver
        view = scoped_view(
            suspect, store, profile_summaries,
            substantial_fraction=substantial_fraction,
            salt=salt, rate_table=rate_table,
        )
        return envelope({"scope": view.to_json(), "case_id": case_id})

    @app.post("/cases/{case_id}/decision")
    async def decide(case_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return error(400, "request body must be JSON")
        if not isinstance(body, dict) or "decision" not in body:
            return error(400, "body must carry a 'decision' field")
        note = body.get("note", "")
        if not isinstance(note, str):
            return error(400, "'note' must be a string")
        try:
            case = case_store.record_decision(case_id, body["decision"], note)
        except NotFoundError:
            return error(404, f"unknown case {case_id}")
        except ConflictError as exc:
            return error(409, str(exc))
        except ValueError as exc:
            return error(400, str(exc))
        return envelope({"case": case.detail()})

    return app


# --- wiring from pipeline artifacts -------------------------------------------


def load_scored_rows(path: Path) -> list[ScoredRow]:
    rows = []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        for record in reader:
            contributions = {
                name: float(record[f"contrib_{name}"])
                for name in INDICATORS
                if f"contrib_{name}" in record
            }
            rows.append(
                ScoredRow(
                    position=int(record["position"]),
                    p_hat=float(record["p_hat"]),
                    raw_decision=record["raw_decision"] == "1",
                    composite=float(record["composite"]),
                    final_decision=record["final_decision"] == "1",
                    contributions=contributions,
                )
            )
    return rows


def build_app_from_workdir(config, seed: int | None = None) -> FastAPI:
    from .pipeline import MissingArtifactError, _paths, _rate_table, _seeds

    paths = _paths(config)
    seed = seed if seed is not None else _seeds(config)[0]
    scored_path = paths["predictions"] / f"all-seed-{seed}.csv"
    if not scored_path.exists():
        raise MissingArtifactError(
            f"missing artifact {scored_path} (run `crpaml score` first)"
        )
    store = TransactionStore.load(paths["store"])
    profiles = json.loads(paths["profiles"].read_text())["accounts"]
    schema_hash = ""
    if paths["schema"].exists():
        from .crpnet.features import FeatureSchema

        schema_hash = FeatureSchema.load(paths["schema"]).version_hash
    checkpoint_path = paths["checkpoints"] / f"seed-{seed}.bin"
    checkpoint_hash = (
        hashlib.sha256(checkpoint_path.read_bytes()).hexdigest()
        if checkpoint_path.exists() else ""
    )
    tau = -math.inf
    metrics_path = paths["metrics"] / f"seed-{seed}.json"
    if metrics_path.exists():
        stored = json.loads(metrics_path.read_text())["tau"]
        tau = -math.inf if stored is None else stored

    case_store = CaseStore(
        load_scored_rows(scored_path),
        default_tau=tau,
        log_path=config.workdir / "cases" / "decisions.log",
    )
    serve = config["serve"]
    return build_app(
        store=store,
        profile_summaries=profiles,
        case_store=case_store,
        checkpoint_hash=checkpoint_hash,
        schema_hash=schema_hash,
        substantial_fraction=serve["substantial_fraction"],
        suspect_side=serve["suspect"],
        rate_table=_rate_table(config),
    )
