"""AML risk-indicator tables, per-transaction risk features, and the
post-prediction false-positive filter.

Five indicators are fitted from labeled training data: payment format,
currency, USD volume band, pair frequency, and bank relation. Each yields
a laundering probability; their log posterior-odds against the base rate
sum to an additive, per-indicator explainable composite score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import minority_f1
from .txstore import PaymentFormat, RateTable, TransactionRecord, to_usd

VOLUME_EDGES_USD = (Decimal(100), Decimal(1_000), Decimal(10_000), Decimal(25_000), Decimal(100_000))
VOLUME_LABELS = ("<=100", "<=1000", "<=10000", "<=25000", "<=100000", ">100000")

FREQ_LABELS = ("one_time", "0-8h", "8-24h", ">24h")
_EIGHT_HOURS = 8 * 3600
_DAY = 24 * 3600

BANK_RELATIONS = ("same_bank", "cross_bank_same_currency", "cross_currency")

INDICATORS = ("format", "currency", "volume", "frequency", "bank_relation")


def volume_bucket(usd: Decimal) -> int:
    for i, edge in enumerate(VOLUME_EDGES_USD):
        if usd <= edge:
            return i
    return len(VOLUME_EDGES_USD)


def frequency_bucket(gap_seconds: int | None) -> int:
    """Gap between this and the previous transaction of the same ordered
    (sender, receiver) pair; None means the pair has no prior history."""
    if gap_seconds is None:
        return 0
    if gap_seconds < _EIGHT_HOURS:
        return 1
    if gap_seconds < _DAY:
        return 2
    return 3


def bank_relation(txn: TransactionRecord) -> str:
    if txn.payment_currency != txn.receiving_currency:
        return "cross_currency"
    if txn.from_bank != txn.to_bank:
        return "cross_bank_same_currency"
    return "same_bank"


@dataclass
class RiskTables:
    p_launder_given_format: dict[str, float]
    p_launder_given_currency: dict[str, float]
    p_launder_given_volume_bucket: list[float]  # VOLUME_LABELS order
    freq_bucket_dist: list[tuple[float, float]]  # (share normal, share laundering)
    p_launder_given_bank_relation: dict[str, float]
    prior: float
    smoothing: float
    training_size: int
    category_totals: dict[str, dict[str, int]]  # per table, per category row count

    @property
    def floor(self) -> float:
        return self.smoothing / (self.training_size + 2 * self.smoothing)

    def unseen_probability(self) -> float:
        return max(self.prior, self.floor)

    def clamp(self, p: float) -> float:
        return min(max(p, self.floor), 1.0 - self.floor)

    def to_json(self) -> dict:
        return {
            "prior": self.prior,
            "smoothing": self.smoothing,
            "training_size": self.training_size,
            "format": self.p_launder_given_format,
            "currency": self.p_launder_given_currency,
            "volume_usd": dict(zip(VOLUME_LABELS, self.p_launder_given_volume_bucket)),
            "frequency": {
                label: {"share_normal": n, "share_laundering": l}
                for label, (n, l) in zip(FREQ_LABELS, self.freq_bucket_dist)
            },
            "bank_relation": self.p_launder_given_bank_relation,
            "category_totals": self.category_totals,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, raw: dict) -> "RiskTables":
        return cls(
            p_launder_given_format=dict(raw["format"]),
            p_launder_given_currency=dict(raw["currency"]),
            p_launder_given_volume_bucket=[raw["volume_usd"][l] for l in VOLUME_LABELS],
            freq_bucket_dist=[
                (raw["frequency"][l]["share_normal"], raw["frequency"][l]["share_laundering"])
                for l in FREQ_LABELS
            ],
            p_launder_given_bank_relation=dict(raw["bank_relation"]),
            prior=raw["prior"],
            smoothing=raw["smoothing"],
            training_size=raw["training_size"],
            category_totals={k: dict(v) for k, v in raw["category_totals"].items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "RiskTables":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RiskFeatures:
    r_format: float
    r_currency: float
    r_volume: float
    r_freq_posterior: float
    r_bank: float
    composite: float

    def values(self) -> list[float]:
        return [self.r_format, self.r_currency, self.r_volume, self.r_freq_posterior, self.r_bank]

    def contributions(self, tables: RiskTables) -> dict[str, float]:
        """Per-indicator ln(r_i / prior) terms; they sum to the composite."""
        return {
            name: math.log(tables.clamp(r) / tables.prior)
            for name, r in zip(INDICATORS, self.values())
        }


def _smoothed(launder: int, total: int, s: float) -> float:
    return (launder + s) / (total + 2 * s)


def pair_gaps(records: Iterable[TransactionRecord]) -> list[int | None]:
    """Causal previous-transaction gap per ordered (sender, receiver) pair.

    Records must be in timestamp order; the first transaction of a pair
    gets None (the one-time bucket).
    """
    last_seen: dict[tuple, int] = {}
    gaps: list[int | None] = []
    for txn in records:
        key = (txn.sender, txn.receiver)
        previous = last_seen.get(key)
        gaps.append(None if previous is None else txn.timestamp - previous)
        last_seen[key] = txn.timestamp
    return gaps


def fit_risk_tables(
    records: Sequence[TransactionRecord],
    rate_table: RateTable,
    smoothing: float = 1.0,
    labels: Sequence[bool] | None = None,
) -> RiskTables:
    """Count-based conditional laundering probabilities with Laplace
    smoothing, fitted on the training partition only.

    Pair-frequency gaps are derived from the training records themselves so
    no out-of-partition timestamps enter the fitted values.
    """
    if not records:
        raise ValueError("cannot fit risk tables on an empty training set")
    if labels is None:
        labels = [r.is_laundering for r in records]
    if len(labels) != len(records):
        raise ValueError("labels must align with records")
    if smoothing < 0:
        raise ValueError("smoothing pseudo-count must be >= 0")

    order = sorted(range(len(records)), key=lambda i: records[i].timestamp)
    ordered = [records[i] for i in order]
    ordered_labels = [labels[i] for i in order]
    gaps = pair_gaps(ordered)

    fmt_counts = {f.value: [0, 0] for f in PaymentFormat}  # [total, laundering]
    ccy_counts: dict[str, list[int]] = {}
    vol_counts = [[0, 0] for _ in VOLUME_LABELS]
    freq_counts = [[0, 0] for _ in FREQ_LABELS]  # [normal, laundering]
    rel_counts = {r: [0, 0] for r in BANK_RELATIONS}

    n_launder = 0
    for txn, label, gap in zip(ordered, ordered_labels, gaps):
        hit = 1 if label else 0
        n_launder += hit
        fmt_counts[txn.payment_format.value][0] += 1
        fmt_counts[txn.payment_format.value][1] += hit
        ccy = ccy_counts.setdefault(txn.payment_currency, [0, 0])
        ccy[0] += 1
        ccy[1] += hit
        vb = volume_bucket(to_usd(txn.amount_paid, txn.payment_currency, rate_table))
        vol_counts[vb][0] += 1
        vol_counts[vb][1] += hit
        fb = frequency_bucket(gap)
        freq_counts[fb][label] += 1
        rel = rel_counts[bank_relation(txn)]
        rel[0] += 1
        rel[1] += hit

    total = len(ordered)
    n_normal = total - n_launder
    # prior must stay inside (0, 1) even on a degenerate label column,
    # otherwise the log-odds composite is undefined
    edge = max(smoothing, 1.0) / (total + 2 * max(smoothing, 1.0))
    prior = min(max(n_launder / total, edge), 1.0 - edge)

    freq_dist = []
    for normal, laundering in freq_counts:
        share_n = normal / n_normal if n_normal else 1.0 / len(FREQ_LABELS)
        share_l = laundering / n_launder if n_launder else 1.0 / len(FREQ_LABELS)
        freq_dist.append((share_n, share_l))

    return RiskTables(
        p_launder_given_format={
            f: _smoothed(l, t, smoothing) for f, (t, l) in fmt_counts.items() if t > 0
        },
        p_launder_given_currency={
            c: _smoothed(l, t, smoothing) for c, (t, l) in ccy_counts.items()
        },
        p_launder_given_volume_bucket=[_smoothed(l, t, smoothing) for t, l in vol_counts],
        freq_bucket_dist=freq_dist,
        p_launder_given_bank_relation={
            r: _smoothed(l, t, smoothing) for r, (t, l) in rel_counts.items() if t > 0
        },
        prior=prior,
        smoothing=smoothing,
        training_size=total,
        category_totals={
            "format": {f: t for f, (t, _) in fmt_counts.items()},
            "currency": {c: t for c, (t, _) in ccy_counts.items()},
            "volume_usd": {lbl: t for lbl, (t, _) in zip(VOLUME_LABELS, vol_counts)},
            "frequency": {lbl: n + l for lbl, (n, l) in zip(FREQ_LABELS, freq_counts)},
            "bank_relation": {r: t for r, (t, _) in rel_counts.items()},
        },
    )


def risk_features(
    txn: TransactionRecord,
    partner_gap_seconds: int | None,
    tables: RiskTables,
    rate_table: RateTable,
) -> RiskFeatures:
    """Look up the five indicators for one transaction and fold them into
    the additive composite; unseen table categories fall back to the
    prior (floored), keeping the function total."""
    unseen = tables.unseen_probability()
    r_format = tables.p_launder_given_format.get(txn.payment_format.value, unseen)
    r_currency = tables.p_launder_given_currency.get(txn.payment_currency, unseen)
    r_volume = tables.p_launder_given_volume_bucket[
        volume_bucket(to_usd(txn.amount_paid, txn.payment_currency, rate_table))
    ]
    r_bank = tables.p_launder_given_bank_relation.get(bank_relation(txn), unseen)

    share_n, share_l = tables.freq_bucket_dist[frequency_bucket(partner_gap_seconds)]
    prior = tables.prior
    denominator = share_l * prior + share_n * (1.0 - prior)
    r_freq = share_l * prior / denominator if denominator > 0 else prior

    parts = [r_format, r_currency, r_volume, r_freq, r_bank]
    composite = sum(math.log(tables.clamp(p) / prior) for p in parts)
    return RiskFeatures(r_format, r_currency, r_volume, r_freq, r_bank, composite)


NEG_INF = float("-inf")


def calibrate_filter_threshold(
    predictions: Sequence[bool],
    composites: Sequence[float],
    labels: Sequence[bool],
) -> float:
    """Pick the composite cutoff maximizing minority F1 after demotion.

    Candidates are every observed composite plus -inf, so doing nothing is
    always on the table and the calibrated filter can never lower F1 on
    the calibration split. Ties resolve toward the least filtering.
    """
    if len(predictions) != len(composites) or len(predictions) != len(labels):
        raise ValueError("predictions, composites, and labels must align")
    if not any(predictions):
        return NEG_INF

    candidates = [NEG_INF] + sorted(set(composites))
    best_tau, best_f1 = NEG_INF, -1.0
    for tau in candidates:
        filtered = apply_risk_filter(predictions, composites, tau)
        f1 = minority_f1(filtered, labels)
        if f1 > best_f1:
            best_tau, best_f1 = tau, f1
    return best_tau


def apply_risk_filter(
    predictions: Sequence[bool],
    composites: Sequence[float],
    tau: float,
) -> list[bool]:
    """Demote positives whose composite risk falls below tau."""
    if len(predictions) != len(composites):
        raise ValueError("predictions and composites must align")
    return [bool(p) and not (c < tau) for p, c in zip(predictions, composites)]
