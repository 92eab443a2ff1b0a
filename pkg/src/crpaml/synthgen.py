"""Synthetic labeled transaction generator.

Emits background commerce traffic plus planted laundering topologies
(fan-in, fan-out, gather-scatter, cycle, stack) so the whole pipeline can
be exercised without the external dataset. Deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path

from .txstore import (
    DEFAULT_RATES,
    PaymentFormat,
    TransactionRecord,
    TransactionStore,
)


class PatternKind(str, Enum):
    FAN_IN = "fan_in"
    FAN_OUT = "fan_out"
    GATHER_SCATTER = "gather_scatter"
    CYCLE = "cycle"
    STACK = "stack"


class ConfigurationError(ValueError):
    """Generator config cannot be satisfied."""


@dataclass
class SynthConfig:
    n_accounts: int = 1000
    n_background_txns: int = 50_000
    illicit_ratio: float = 0.002
    pattern_mix: dict[str, float] = field(
        default_factory=lambda: {
            "fan_in": 1.0,
            "fan_out": 1.0,
            "gather_scatter": 1.0,
            "cycle": 1.0,
            "stack": 1.0,
        }
    )
    seed: int = 1
    time_span: int = 10 * 24 * 3600  # seconds

    def validate(self) -> None:
        if self.n_accounts < 24:
            raise ConfigurationError("need at least 24 accounts for pattern topologies")
        if not 0 < self.illicit_ratio < 1:
            raise ConfigurationError("illicit_ratio must lie in (0, 1)")
        weights = [self.pattern_mix.get(k.value, 0.0) for k in PatternKind]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigurationError("pattern weights must be non-negative with positive sum")
        if self.target_illicit() < 3:
            raise ConfigurationError(
                "illicit_ratio x n_background_txns below the minimum pattern size"
            )

    def target_illicit(self) -> int:
        return round(self.n_background_txns * self.illicit_ratio / (1 - self.illicit_ratio))


@dataclass
class PatternInstance:
    kind: PatternKind
    member_accounts: list[str]  # account tokens "bank/account", hub (if any) first
    member_txns: list[int]  # positions in the sealed store

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "member_accounts": self.member_accounts,
            "member_txns": self.member_txns,
        }


# Background accounts prefer one currency/format so "most frequent" profile
# features are non-trivial; the skew mirrors a USD-heavy book.
_CCY_WEIGHTS = {
    "US Dollar": 40, "Euro": 12, "UK Pound": 6, "Yuan": 6, "Yen": 5,
    "Canadian Dollar": 4, "Australian Dollar": 4, "Rupee": 4, "Swiss Franc": 3,
    "Brazil Real": 3, "Mexican Peso": 3, "Ruble": 3, "Shekel": 2,
    "Saudi Riyal": 2, "Bitcoin": 1,
}
_FMT_WEIGHTS = {
    PaymentFormat.CREDIT_CARD: 28, PaymentFormat.CHEQUE: 22, PaymentFormat.CASH: 18,
    PaymentFormat.ACH: 16, PaymentFormat.WIRE: 8, PaymentFormat.REINVESTMENT: 5,
    PaymentFormat.BITCOIN: 3,
}
# Laundering traffic leans on fast low-scrutiny rails; Wire and Reinvestment
# never appear, so their fitted risk stays at the smoothing floor.
_ILLICIT_FMT_WEIGHTS = {
    PaymentFormat.ACH: 62, PaymentFormat.BITCOIN: 14, PaymentFormat.CASH: 10,
    PaymentFormat.CHEQUE: 7, PaymentFormat.CREDIT_CARD: 7,
}

_BASE_TIME = 1_640_995_200  # 2022/01/01 00:00 UTC
_PATTERN_MIN = {kind: 3 for kind in PatternKind}
_PATTERN_MIN[PatternKind.GATHER_SCATTER] = 6


@dataclass
class _Account:
    bank: str
    account: str
    currency: str
    fmt: PaymentFormat
    scale: float  # lognormal location of this account's amounts
    partners: list[int] = field(default_factory=list)

    def token(self) -> str:
        return f"{self.bank}/{self.account}"


@dataclass
class _Draft:
    ts: int
    src: int
    dst: int
    amount_usd: float
    pay_ccy: str
    recv_ccy: str
    fmt: PaymentFormat
    laundering: bool


def _weighted_choice(rng: random.Random, weights: dict):
    keys = list(weights.keys())
    return rng.choices(keys, weights=[weights[k] for k in keys], k=1)[0]


def _make_accounts(rng: random.Random, n: int) -> list[_Account]:
    accounts = []
    n_banks = max(3, n // 60)
    for i in range(n):
        accounts.append(
            _Account(
                bank=f"B{rng.randrange(n_banks):03d}",
                account=f"A{i:06d}",
                currency=_weighted_choice(rng, _CCY_WEIGHTS),
                fmt=_weighted_choice(rng, _FMT_WEIGHTS),
                scale=rng.uniform(4.0, 7.5),  # e^4 ~ 55 to e^7.5 ~ 1800 USD median
            )
        )
    by_bank: dict[str, list[int]] = {}
    for i, acct in enumerate(accounts):
        by_bank.setdefault(acct.bank, []).append(i)
    for i, acct in enumerate(accounts):
        k = rng.randint(3, 9)
        same_bank = [p for p in by_bank[acct.bank] if p != i]
        partners = set()
        while len(partners) < k:
            if same_bank and rng.random() < 0.5:
                partners.add(rng.choice(same_bank))
            else:
                p = rng.randrange(n)
                if p != i:
                    partners.add(p)
        acct.partners = sorted(partners)
    return accounts


def _background_amount(rng: random.Random, acct: _Account) -> float:
    # heavy-tailed so the size-bucket percentiles are strictly ordered
    return max(1.0, rng.lognormvariate(acct.scale, 1.1))


def _emit_background(rng: random.Random, cfg: SynthConfig, accounts: list[_Account]) -> list[_Draft]:
    """Exactly cfg.n_background_txns rows: ~80% fresh, ~20% short-gap repeats
    of earlier pairs so every frequency bucket carries normal mass."""
    n = len(accounts)
    n_repeat = cfg.n_background_txns // 5
    n_fresh = cfg.n_background_txns - n_repeat

    drafts: list[_Draft] = []
    for _ in range(n_fresh):
        src_idx = rng.randrange(n)
        src = accounts[src_idx]
        if src.partners and rng.random() < 0.8:
            dst_idx = rng.choice(src.partners)
        else:
            dst_idx = rng.randrange(n)
            if dst_idx == src_idx:
                dst_idx = (dst_idx + 1) % n
        pay_ccy = src.currency if rng.random() < 0.85 else _weighted_choice(rng, _CCY_WEIGHTS)
        recv_ccy = pay_ccy
        if rng.random() < 0.08:  # occasional currency exchange, never illicit
            recv_ccy = accounts[dst_idx].currency
        drafts.append(
            _Draft(
                ts=_BASE_TIME + rng.randrange(cfg.time_span),
                src=src_idx,
                dst=dst_idx,
                amount_usd=_background_amount(rng, src),
                pay_ccy=pay_ccy,
                recv_ccy=recv_ccy,
                fmt=src.fmt if rng.random() < 0.8 else _weighted_choice(rng, _FMT_WEIGHTS),
                laundering=False,
            )
        )
    for origin in rng.sample(drafts, min(n_repeat, len(drafts))):
        if rng.random() < 0.75:
            gap = rng.randrange(600, 8 * 3600)
        else:
            gap = rng.randrange(8 * 3600, 24 * 3600)
        ts = origin.ts + gap
        if ts >= _BASE_TIME + cfg.time_span:
            ts = max(_BASE_TIME, origin.ts - gap)
        drafts.append(
            _Draft(
                ts=ts,
                src=origin.src,
                dst=origin.dst,
                amount_usd=_background_amount(rng, accounts[origin.src]),
                pay_ccy=origin.pay_ccy,
                recv_ccy=origin.recv_ccy,
                fmt=origin.fmt,
                laundering=False,
            )
        )
    return drafts


def _illicit_amount(rng: random.Random) -> float:
    # bulk of laundering sits in the 1k-25k USD band
    return rng.uniform(1_000.0, 25_000.0)


class _PatternBuilder:
    def __init__(self, rng: random.Random, cfg: SynthConfig, accounts: list[_Account]):
        self.rng = rng
        self.cfg = cfg
        self.accounts = accounts
        # mules are thin-file accounts, so a laundering burst dominates their history
        self.pool = sorted(range(len(accounts)), key=lambda i: accounts[i].scale)[
            : max(24, len(accounts) // 3)
        ]

    def _pick(self, k: int) -> list[int]:
        return self.rng.sample(self.pool, k)

    def _window(self) -> tuple[int, int]:
        span = self.cfg.time_span
        start = _BASE_TIME + self.rng.randrange(max(1, span - 48 * 3600))
        return start, 36 * 3600

    def _times(self, start: int, window: int, k: int) -> list[int]:
        return sorted(start + self.rng.randrange(window) for _ in range(k))

    def _edge(self, src: int, dst: int, ts: int, amount: float) -> _Draft:
        ccy = self.accounts[src].currency
        return _Draft(
            ts=ts,
            src=src,
            dst=dst,
            amount_usd=amount,
            pay_ccy=ccy,
            recv_ccy=ccy,
            fmt=_weighted_choice(self.rng, _ILLICIT_FMT_WEIGHTS),
            laundering=True,
        )

    def build(self, kind: PatternKind, budget: int) -> tuple[list[_Draft], list[int]]:
        rng = self.rng
        start, window = self._window()

        if kind in (PatternKind.FAN_IN, PatternKind.FAN_OUT):
            k = max(3, min(budget, rng.randint(4, 8)))
            members = self._pick(k + 1)
            hub, spokes = members[0], members[1:]
            ts = self._times(start, window, k)
            if kind is PatternKind.FAN_IN:
                drafts = [self._edge(s, hub, t, _illicit_amount(rng)) for s, t in zip(spokes, ts)]
            else:
                drafts = [self._edge(hub, s, t, _illicit_amount(rng)) for s, t in zip(spokes, ts)]
            return drafts, [hub] + spokes

        if kind is PatternKind.GATHER_SCATTER:
            k_in = max(3, min(budget // 2, rng.randint(3, 5)))
            k_out = max(3, min(budget - k_in, rng.randint(3, 5)))
            members = self._pick(k_in + k_out + 1)
            hub, senders, receivers = members[0], members[1 : k_in + 1], members[k_in + 1 :]
            ts_in = self._times(start, window // 2, k_in)
            amounts = [_illicit_amount(rng) for _ in senders]
            drafts = [self._edge(s, hub, t, a) for s, t, a in zip(senders, ts_in, amounts)]
            scatter_start = max(ts_in) + rng.randrange(600, 6 * 3600)
            ts_out = self._times(scatter_start, 12 * 3600, k_out)
            split = _split_amount(rng, sum(amounts) * rng.uniform(0.85, 0.98), k_out)
            drafts += [self._edge(hub, r, t, a) for r, t, a in zip(receivers, ts_out, split)]
            return drafts, [hub] + senders + receivers

        if kind is PatternKind.CYCLE:
            k = max(3, min(budget, rng.randint(3, 6)))
            members = self._pick(k)
            amount = _illicit_amount(rng)
            ts = self._times(start, window, k)
            drafts = [
                self._edge(members[i], members[(i + 1) % k], ts[i], amount * 0.97**i)
                for i in range(k)
            ]
            return drafts, members

        # stack: a chain of >= 3 hops pushing one tranche forward
        k = max(3, min(budget, rng.randint(3, 6)))
        members = self._pick(k + 1)
        amount = _illicit_amount(rng)
        ts = self._times(start, window, k)
        drafts = [
            self._edge(members[i], members[i + 1], ts[i], amount * 0.97**i)
            for i in range(k)
        ]
        return drafts, members


def _split_amount(rng: random.Random, total: float, parts: int) -> list[float]:
    cuts = sorted(rng.uniform(0.2, 1.0) for _ in range(parts))
    norm = sum(cuts)
    return [total * c / norm for c in cuts]


def generate(config: SynthConfig) -> tuple[TransactionStore, list[PatternInstance]]:
    """Build a sealed store plus its planted pattern instances.

    Deterministic for a fixed config; every laundering-labeled row belongs
    to exactly one pattern instance; the achieved illicit fraction lands
    within 10% relative of the configured ratio.
    """
    config.validate()
    rng = random.Random(config.seed)
    accounts = _make_accounts(rng, config.n_accounts)
    drafts = _emit_background(rng, config, accounts)

    target = config.target_illicit()
    builder = _PatternBuilder(rng, config, accounts)
    kinds = [k for k in PatternKind if config.pattern_mix.get(k.value, 0.0) > 0]
    patterns: list[tuple[list[_Draft], list[int], PatternKind]] = []
    emitted = 0
    while emitted < target:
        budget = target - emitted
        feasible = [k for k in kinds if _PATTERN_MIN[k] <= budget]
        if not feasible:
            break
        kind = rng.choices(feasible, weights=[config.pattern_mix[k.value] for k in feasible], k=1)[0]
        pattern, members = builder.build(kind, budget)
        patterns.append((pattern, members, kind))
        emitted += len(pattern)

    all_drafts = list(drafts)
    for pattern, _, _ in patterns:
        all_drafts.extend(pattern)
    order = sorted(range(len(all_drafts)), key=lambda i: (all_drafts[i].ts, i))
    position_of = {draft_idx: pos for pos, draft_idx in enumerate(order)}

    records = [_materialize(all_drafts[i], accounts) for i in order]
    store = TransactionStore(records, meta=f"synthgen seed={config.seed}")

    instances = []
    cursor = len(drafts)
    for pattern, members, kind in patterns:
        positions = sorted(position_of[cursor + j] for j in range(len(pattern)))
        cursor += len(pattern)
        instances.append(
            PatternInstance(
                kind=kind,
                member_accounts=[accounts[m].token() for m in members],
                member_txns=positions,
            )
        )
    return store, instances


def _materialize(draft: _Draft, accounts: list[_Account]) -> TransactionRecord:
    src, dst = accounts[draft.src], accounts[draft.dst]
    paid = _in_currency(draft.amount_usd, draft.pay_ccy)
    received = paid if draft.recv_ccy == draft.pay_ccy else _in_currency(draft.amount_usd, draft.recv_ccy)
    return TransactionRecord(
        timestamp=draft.ts - draft.ts % 60,  # minute-aligned like the source data
        from_bank=src.bank,
        from_account=src.account,
        to_bank=dst.bank,
        to_account=dst.account,
        amount_received=received,
        receiving_currency=draft.recv_ccy,
        amount_paid=paid,
        payment_currency=draft.pay_ccy,
        payment_format=draft.fmt,
        is_laundering=draft.laundering,
    )


def _in_currency(amount_usd: float, currency: str) -> Decimal:
    quant = Decimal("0.00000001") if currency == "Bitcoin" else Decimal("0.01")
    amount = (Decimal(f"{amount_usd:.4f}") / DEFAULT_RATES.rate(currency)).quantize(quant)
    return amount if amount > 0 else quant


def validate_patterns(store: TransactionStore, instances: list[PatternInstance]) -> list[str]:
    """Check each instance against its topology invariant; returns violations."""
    violations = []
    n = len(store)
    for idx, inst in enumerate(instances):
        tag = f"instance {idx} ({inst.kind.value})"
        if any(t < 0 or t >= n for t in inst.member_txns):
            violations.append(f"{tag}: dangling transaction id")
            continue
        txns = [store.records[t] for t in inst.member_txns]
        if not all(t.is_laundering for t in txns):
            violations.append(f"{tag}: member transaction not labeled laundering")
        violations.extend(f"{tag}: {v}" for v in _check_topology(inst, txns))
    return violations


def _check_topology(inst: PatternInstance, txns: list[TransactionRecord]) -> list[str]:
    out = []
    senders = {t.sender.token() for t in txns}
    receivers = {t.receiver.token() for t in txns}
    kind = inst.kind
    if kind is PatternKind.FAN_IN:
        if len(receivers) != 1:
            out.append("fan_in must converge on one receiver")
        if len(senders) < 3:
            out.append("fan_in needs >= 3 senders")
    elif kind is PatternKind.FAN_OUT:
        if len(senders) != 1:
            out.append("fan_out must originate from one sender")
        if len(receivers) < 3:
            out.append("fan_out needs >= 3 receivers")
    elif kind is PatternKind.GATHER_SCATTER:
        hub = inst.member_accounts[0]
        gather = [t for t in txns if t.receiver.token() == hub]
        scatter = [t for t in txns if t.sender.token() == hub]
        if len(gather) < 3 or len(scatter) < 3:
            out.append("gather_scatter needs >= 3 edges on each side of the hub")
        if gather and scatter and max(t.timestamp for t in gather) > min(t.timestamp for t in scatter):
            out.append("gather phase must complete before scatter begins")
    elif kind is PatternKind.CYCLE:
        ordered = sorted(txns, key=lambda t: t.timestamp)
        origin = ordered[0].sender.token()
        if ordered[-1].receiver.token() != origin:
            out.append("cycle must return funds to the origin account")
        for prev, cur in zip(ordered, ordered[1:]):
            if prev.receiver.token() != cur.sender.token():
                out.append("cycle hops must chain")
                break
    elif kind is PatternKind.STACK:
        if len(txns) < 3:
            out.append("stack needs >= 3 hops")
        ordered = sorted(txns, key=lambda t: t.timestamp)
        for prev, cur in zip(ordered, ordered[1:]):
            if prev.receiver.token() != cur.sender.token():
                out.append("stack hops must chain")
                break
        if ordered and ordered[-1].receiver.token() == ordered[0].sender.token():
            out.append("stack must not close back on the origin")
    return out


def write_sidecar(instances: list[PatternInstance], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([inst.to_json() for inst in instances], indent=2) + "\n",
        encoding="utf-8",
    )


def load_sidecar(path: str | Path) -> list[PatternInstance]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        PatternInstance(
            kind=PatternKind(item["kind"]),
            member_accounts=list(item["member_accounts"]),
            member_txns=list(item["member_txns"]),
        )
        for item in raw
    ]
