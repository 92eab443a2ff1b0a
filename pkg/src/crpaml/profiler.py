"""Causal financial account profiles and account-class statistics.

Profiles are folded incrementally over the time-ordered transaction
stream; everything derived from them (size thresholds, the transaction
type vocabulary, the class grid) is fitted on the training partition only
and then frozen.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

from .txstore import (
    CURRENCIES,
    AccountId,
    OrderingError,
    PaymentFormat,
    RateTable,
    TransactionRecord,
    TransactionStore,
    to_usd,
)

FORMATS = tuple(PaymentFormat)


class SizeBucket(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"
    EXTRA_LARGE = "extra_large"


SIZE_BUCKETS = tuple(SizeBucket)


@dataclass(frozen=True)
class SizeThresholds:
    """Empirical 50th/80th/93rd USD percentiles of the training partition."""

    p50_usd: Decimal
    p80_usd: Decimal
    p93_usd: Decimal

    def __post_init__(self):
        if not self.p50_usd <= self.p80_usd <= self.p93_usd:
            raise ValueError("size thresholds must be non-decreasing")

    def bucket(self, usd: Decimal) -> SizeBucket:
        if usd <= self.p50_usd:
            return SizeBucket.SMALL
        if usd <= self.p80_usd:
            return SizeBucket.MEDIUM
        if usd <= self.p93_usd:
            return SizeBucket.LARGE
        return SizeBucket.EXTRA_LARGE


class TxCategory(NamedTuple):
    size_bucket: SizeBucket
    currency: str
    format: PaymentFormat


def nearest_rank(sorted_values: Sequence, percentile: float):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of empty sequence")
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def fit_size_thresholds(
    records: Iterable[TransactionRecord] | TransactionStore, rate_table: RateTable
) -> SizeThresholds:
    amounts = sorted(to_usd(r.amount_paid, r.payment_currency, rate_table) for r in records)
    if not amounts:
        raise ValueError("cannot fit size thresholds on an empty store")
    return SizeThresholds(
        p50_usd=nearest_rank(amounts, 50),
        p80_usd=nearest_rank(amounts, 80),
        p93_usd=nearest_rank(amounts, 93),
    )


def categorize(
    txn: TransactionRecord, direction: str, thresholds: SizeThresholds, rate_table: RateTable
) -> TxCategory:
    """Size keyed to the paid amount in USD; currency is the one on the
    profiled account's side of the transaction."""
    usd = to_usd(txn.amount_paid, txn.payment_currency, rate_table)
    currency = txn.payment_currency if direction == "out" else txn.receiving_currency
    return TxCategory(thresholds.bucket(usd), currency, txn.payment_format)


@dataclass
class PartnerStats:
    count: int = 0
    sum_usd: Decimal = Decimal(0)
    last_timestamp: int = 0
    sum_inter_arrival: int = 0  # seconds, gaps between consecutive same-partner txns


@dataclass
class AccountProfile:
    account: AccountId
    n_in: int = 0
    n_out: int = 0
    sum_in_usd: Decimal = Decimal(0)
    sum_out_usd: Decimal = Decimal(0)
    partners: dict[AccountId, PartnerStats] = field(default_factory=dict)
    category_hist: Counter = field(default_factory=Counter)
    currency_hist: Counter = field(default_factory=Counter)
    format_hist: Counter = field(default_factory=Counter)
    first_seen: int | None = None
    last_seen: int | None = None

    @property
    def n_total(self) -> int:
        return self.n_in + self.n_out

    @property
    def total_volume_usd(self) -> Decimal:
        return self.sum_in_usd + self.sum_out_usd

    def gap_events(self) -> int:
        return sum(p.count - 1 for p in self.partners.values())

    def sum_gaps(self) -> int:
        return sum(p.sum_inter_arrival for p in self.partners.values())


def update_profile(
    profile: AccountProfile,
    txn: TransactionRecord,
    direction: str,
    thresholds: SizeThresholds,
    rate_table: RateTable,
) -> AccountProfile:
    """Advance every counter by exactly one event; mutates and returns."""
    if direction not in ("in", "out"):
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    if profile.last_seen is not None and txn.timestamp < profile.last_seen:
        raise OrderingError(
            f"transaction at {txn.timestamp} precedes profile cursor {profile.last_seen}"
        )

    if direction == "out":
        usd = to_usd(txn.amount_paid, txn.payment_currency, rate_table)
        partner = txn.receiver
        profile.n_out += 1
        profile.sum_out_usd += usd
    else:
        usd = to_usd(txn.amount_received, txn.receiving_currency, rate_table)
        partner = txn.sender
        profile.n_in += 1
        profile.sum_in_usd += usd

    stats = profile.partners.get(partner)
    if stats is None:
        stats = profile.partners[partner] = PartnerStats()
    else:
        stats.sum_inter_arrival += txn.timestamp - stats.last_timestamp
    stats.count += 1
    stats.sum_usd += usd
    stats.last_timestamp = txn.timestamp

    category = categorize(txn, direction, thresholds, rate_table)
    profile.category_hist[category] += 1
    profile.currency_hist[category.currency] += 1
    profile.format_hist[txn.payment_format] += 1

    if profile.first_seen is None:
        profile.first_seen = txn.timestamp
    profile.last_seen = txn.timestamp
    return profile


def build_profiles(
    store: TransactionStore,
    thresholds: SizeThresholds,
    rate_table: RateTable,
    until_timestamp: int | None = None,
) -> dict[AccountId, AccountProfile]:
    """Fold the stream into per-account profiles, using only transactions
    strictly before ``until_timestamp`` when given."""
    profiles: dict[AccountId, AccountProfile] = {}
    for txn in store:
        if until_timestamp is not None and txn.timestamp >= until_timestamp:
            break
        for account, direction in ((txn.sender, "out"), (txn.receiver, "in")):
            profile = profiles.get(account)
            if profile is None:
                profile = profiles[account] = AccountProfile(account)
            update_profile(profile, txn, direction, thresholds, rate_table)
    return profiles


# --- transaction type vocabulary ---------------------------------------


class TypeVocabulary:
    """The most frequent (size, currency, format) triples plus "other"."""

    def __init__(self, triples: Sequence[TxCategory]):
        self.triples = list(triples)
        self._index = {t: i for i, t in enumerate(self.triples)}

    @property
    def other_index(self) -> int:
        return len(self.triples)

    def index(self, category: TxCategory) -> int:
        return self._index.get(category, self.other_index)

    def to_json(self) -> list[list[str]]:
        return [[t.size_bucket.value, t.currency, t.format.value] for t in self.triples]

    @classmethod
    def from_json(cls, raw: list[list[str]]) -> "TypeVocabulary":
        return cls(
            [TxCategory(SizeBucket(s), c, PaymentFormat(f)) for s, c, f in raw]
        )


def fit_type_vocabulary(
    records: Iterable[TransactionRecord],
    thresholds: SizeThresholds,
    rate_table: RateTable,
    size: int = 64,
) -> TypeVocabulary:
    counts: Counter = Counter()
    for txn in records:
        counts[categorize(txn, "out", thresholds, rate_table)] += 1
        counts[categorize(txn, "in", thresholds, rate_table)] += 1
    ranked = sorted(
        counts.items(),
        key=lambda item: (-item[1], item[0][0].value, item[0][1], item[0][2].value),
    )
    return TypeVocabulary([cat for cat, _ in ranked[:size]])


# --- account classes -----------------------------------------------------


@dataclass(frozen=True)
class AccountClass:
    class_id: int
    volume_bucket: int
    count_bucket: int


@dataclass
class ClassStats:
    """Per-class average transaction counts by size, format, and currency."""

    member_count: int
    avg_size_counts: list[float]  # SIZE_BUCKETS order
    avg_format_counts: list[float]  # FORMATS order
    avg_currency_counts: list[float]  # CURRENCIES order

    def row(self) -> list[float]:
        return self.avg_size_counts + self.avg_format_counts + self.avg_currency_counts


CLASS_ROW_WIDTH = len(SIZE_BUCKETS) + len(FORMATS) + len(CURRENCIES)


def _quantile_edges(values: list, buckets: int) -> list:
    ordered = sorted(values)
    return [nearest_rank(ordered, 100.0 * i / buckets) for i in range(1, buckets)]


def _bucket_of(value, edges: list) -> int:
    bucket = 0
    for edge in edges:
        if value > edge:
            bucket += 1
    return bucket


class ClassModel:
    """Quantile grid over (total USD volume, transaction count)."""

    def __init__(
        self,
        volume_edges: list[Decimal],
        count_edges: list[int],
        assignment: dict[AccountId, AccountClass],
        stats: dict[int, ClassStats],
        volume_buckets: int,
        count_buckets: int,
    ):
        self.volume_edges = volume_edges
        self.count_edges = count_edges
        self.assignment = assignment
        self.stats = stats
        self.volume_buckets = volume_buckets
        self.count_buckets = count_buckets

    @property
    def n_classes(self) -> int:
        return self.volume_buckets * self.count_buckets

    def class_of(self, account: AccountId) -> AccountClass:
        known = self.assignment.get(account)
        if known is not None:
            return known
        return AccountClass(0, 0, 0)  # zero-volume bucket for unseen accounts

    def row_for(self, account: AccountId) -> list[float]:
        return self.stats[self.class_of(account).class_id].row()

    def to_json(self) -> dict:
        return {
            "volume_buckets": self.volume_buckets,
            "count_buckets": self.count_buckets,
            "volume_edges": [str(e) for e in self.volume_edges],
            "count_edges": self.count_edges,
            "assignment": {
                account.token(): cls.class_id for account, cls in sorted(self.assignment.items())
            },
            "stats": {
                str(cid): {
                    "member_count": s.member_count,
                    "avg_size_counts": s.avg_size_counts,
                    "avg_format_counts": s.avg_format_counts,
                    "avg_currency_counts": s.avg_currency_counts,
                }
                for cid, s in sorted(self.stats.items())
            },
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ClassModel":
        vb, cb = raw["volume_buckets"], raw["count_buckets"]
        assignment = {}
        for token, class_id in raw["assignment"].items():
            bank, _, account = token.partition("/")
            assignment[AccountId(bank, account)] = AccountClass(
                class_id, class_id // cb, class_id % cb
            )
        stats = {
            int(cid): ClassStats(
                member_count=s["member_count"],
                avg_size_counts=list(s["avg_size_counts"]),
                avg_format_counts=list(s["avg_format_counts"]),
                avg_currency_counts=list(s["avg_currency_counts"]),
            )
            for cid, s in raw["stats"].items()
        }
        return cls(
            volume_edges=[Decimal(e) for e in raw["volume_edges"]],
            count_edges=list(raw["count_edges"]),
            assignment=assignment,
            stats=stats,
            volume_buckets=vb,
            count_buckets=cb,
        )


def assign_classes(
    profiles: dict[AccountId, AccountProfile],
    volume_buckets: int = 4,
    count_buckets: int = 4,
) -> ClassModel:
    """Partition accounts into a quantile grid and average their histograms.

    Stats rows for empty grid cells are borrowed from the nearest occupied
    cell (nearest by volume bucket first) so lookups are total.
    """
    if volume_buckets < 1 or count_buckets < 1:
        raise ValueError("bucket counts must be >= 1")
    if not profiles:
        raise ValueError("cannot assign classes without profiles")

    accounts = sorted(profiles.keys())
    volumes = [profiles[a].total_volume_usd for a in accounts]
    counts = [profiles[a].n_total for a in accounts]
    volume_edges = _quantile_edges(volumes, volume_buckets)
    count_edges = _quantile_edges(counts, count_buckets)

    assignment: dict[AccountId, AccountClass] = {}
    members: dict[int, list[AccountId]] = {}
    for account, volume, count in zip(accounts, volumes, counts):
        vb = _bucket_of(volume, volume_edges)
        cb = _bucket_of(count, count_edges)
        class_id = vb * count_buckets + cb
        assignment[account] = AccountClass(class_id, vb, cb)
        members.setdefault(class_id, []).append(account)

    stats: dict[int, ClassStats] = {}
    for class_id, account_list in members.items():
        stats[class_id] = _average_stats([profiles[a] for a in account_list])

    for vb in range(volume_buckets):
        for cb in range(count_buckets):
            class_id = vb * count_buckets + cb
            if class_id in stats:
                continue
            donor = _nearest_occupied(vb, cb, members, volume_buckets, count_buckets)
            stats[class_id] = stats[donor]

    return ClassModel(volume_edges, count_edges, assignment, stats, volume_buckets, count_buckets)


def _average_stats(profiles: list[AccountProfile]) -> ClassStats:
    n = len(profiles)
    size_sums = [0] * len(SIZE_BUCKETS)
    format_sums = [0] * len(FORMATS)
    currency_sums = [0] * len(CURRENCIES)
    for profile in profiles:
        for category, count in profile.category_hist.items():
            size_sums[SIZE_BUCKETS.index(category.size_bucket)] += count
        for fmt, count in profile.format_hist.items():
            format_sums[FORMATS.index(fmt)] += count
        for currency, count in profile.currency_hist.items():
            currency_sums[CURRENCIES.index(currency)] += count
    return ClassStats(
        member_count=n,
        avg_size_counts=[s / n for s in size_sums],
        avg_format_counts=[s / n for s in format_sums],
        avg_currency_counts=[s / n for s in currency_sums],
    )


def _nearest_occupied(
    vb: int, cb: int, members: dict[int, list], volume_buckets: int, count_buckets: int
) -> int:
    candidates = sorted(members.keys())
    same_column = [c for c in candidates if c % count_buckets == cb]
    pool = same_column or candidates
    return min(
        pool,
        key=lambda c: (abs(c // count_buckets - vb), abs(c % count_buckets - cb), c),
    )


# --- profile feature vector ----------------------------------------------

TOP_TYPES = 5
TYPE_PAD = -1.0


def profile_slot_names(vocab_size: int = 64) -> list[str]:
    """Slot names of the profile feature vector, in layout order."""
    names = [
        "n_in",
        "n_out",
        "mean_in_usd",
        "mean_out_usd",
        "mean_partner_gap_seconds",
        "has_repeat_partner",
        "unique_partners",
    ]
    names += [f"top_currency={c}" for c in CURRENCIES] + ["top_currency=unknown"]
    names += [f"top_format={f.value}" for f in FORMATS] + ["top_format=unknown"]
    names += [f"top_type_{i}" for i in range(TOP_TYPES)]
    names += [f"class_avg_size={b.value}" for b in SIZE_BUCKETS]
    names += [f"class_avg_format={f.value}" for f in FORMATS]
    names += [f"class_avg_currency={c}" for c in CURRENCIES]
    return names


PROFILE_WIDTH = len(profile_slot_names())


def profile_feature_vector(
    profile: AccountProfile | None,
    class_model: ClassModel,
    type_vocab: TypeVocabulary,
) -> list[float]:
    """Fixed-length numeric summary of one account's history.

    A missing or zero-activity profile yields zero counts, neutral one-hot
    blocks, and the class-stats row of the zero-volume bucket.
    """
    currency_hot = [0.0] * (len(CURRENCIES) + 1)
    format_hot = [0.0] * (len(FORMATS) + 1)
    top_types = [TYPE_PAD] * TOP_TYPES

    if profile is None or profile.n_total == 0:
        account = profile.account if profile is not None else None
        row = (
            class_model.row_for(account)
            if account is not None
            else class_model.stats[AccountClass(0, 0, 0).class_id].row()
        )
        return [0.0] * 7 + currency_hot + format_hot + top_types + row

    mean_in = float(profile.sum_in_usd / profile.n_in) if profile.n_in else 0.0
    mean_out = float(profile.sum_out_usd / profile.n_out) if profile.n_out else 0.0
    gap_events = profile.gap_events()
    mean_gap = profile.sum_gaps() / gap_events if gap_events else 0.0

    top_currency = min(profile.currency_hist.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    currency_hot[CURRENCIES.index(top_currency)] = 1.0
    top_format = min(profile.format_hist.items(), key=lambda kv: (-kv[1], kv[0].value))[0]
    format_hot[FORMATS.index(top_format)] = 1.0

    ranked_types = sorted(
        profile.category_hist.items(),
        key=lambda kv: (-kv[1], kv[0][0].value, kv[0][1], kv[0][2].value),
    )
    for i, (category, _) in enumerate(ranked_types[:TOP_TYPES]):
        top_types[i] = float(type_vocab.index(category))

    head = [
        float(profile.n_in),
        float(profile.n_out),
        mean_in,
        mean_out,
        float(mean_gap),
        1.0 if gap_events else 0.0,
        float(len(profile.partners)),
    ]
    return head + currency_hot + format_hot + top_types + class_model.row_for(profile.account)
