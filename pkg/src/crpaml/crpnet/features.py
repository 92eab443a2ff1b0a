"""Feature schema, causal feature extraction, and input assembly.

The network input concatenates five blocks in a fixed, versioned order:
normalized transaction fields, risk features, derived pair features, and
the sender and receiver context embeddings. All continuous slots are
standardized with statistics fitted on the training partition only; the
schema hash pins the layout so training and scoring agree bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..profiler import (
    PROFILE_WIDTH,
    SIZE_BUCKETS,
    AccountProfile,
    ClassModel,
    SizeBucket,
    SizeThresholds,
    TypeVocabulary,
    assign_classes,
    build_profiles,
    fit_size_thresholds,
    fit_type_vocabulary,
    profile_feature_vector,
    profile_slot_names,
    update_profile,
)
from ..riskmodel import (
    FREQ_LABELS,
    RiskFeatures,
    RiskTables,
    fit_risk_tables,
    frequency_bucket,
    risk_features,
)
from ..txstore import (
    CURRENCIES,
    PaymentFormat,
    RateTable,
    TransactionRecord,
    TransactionStore,
    to_usd,
)

FORMATS = tuple(PaymentFormat)

SCHEMA_VERSION = 1
STD_FLOOR = 1e-8

# Continuous profile slots; one-hot and flag slots pass through unscaled.
_PROFILE_NORMALIZE_PREFIXES = (
    "n_in",
    "n_out",
    "mean_in_usd",
    "mean_out_usd",
    "mean_partner_gap_seconds",
    "unique_partners",
    "top_type_",
    "class_avg_",
)


def _tx_slots() -> tuple[list[str], list[bool]]:
    names = [f"pay_ccy={c}" for c in CURRENCIES] + ["pay_ccy=unknown"]
    names += [f"format={f.value}" for f in FORMATS] + ["format=unknown"]
    names += ["usd_paid", "usd_log", "hour_of_day", "day_of_week"]
    normalize = [False] * (len(CURRENCIES) + 1 + len(FORMATS) + 1) + [True] * 4
    return names, normalize


def _risk_slots() -> tuple[list[str], list[bool]]:
    names = ["r_format", "r_currency", "r_volume", "r_freq_posterior", "r_bank", "composite"]
    return names, [True] * len(names)


def _derived_slots() -> tuple[list[str], list[bool]]:
    names = ["partner_gap_seconds", "one_time"]
    names += [f"freq={label}" for label in FREQ_LABELS]
    names += [f"size={b.value}" for b in SIZE_BUCKETS]
    names += ["cross_bank", "cross_currency"]
    normalize = [True, False] + [False] * (len(FREQ_LABELS) + len(SIZE_BUCKETS) + 2)
    return names, normalize


@dataclass
class FeatureBlock:
    name: str
    slots: list[str]
    normalize: list[bool]

    @property
    def width(self) -> int:
        return len(self.slots)


class SchemaMismatchError(ValueError):
    """Artifacts were produced under a different schema version."""


class FeatureSchema:
    """Versioned layout plus training-set normalization statistics."""

    def __init__(
        self,
        context_width: int,
        main_mean: np.ndarray,
        main_std: np.ndarray,
        profile_mean: np.ndarray,
        profile_std: np.ndarray,
        vocab: TypeVocabulary,
    ):
        tx_names, tx_norm = _tx_slots()
        risk_names, risk_norm = _risk_slots()
        derived_names, derived_norm = _derived_slots()
        self.blocks = [
            FeatureBlock("transaction", tx_names, tx_norm),
            FeatureBlock("risk", risk_names, risk_norm),
            FeatureBlock("derived", derived_names, derived_norm),
            FeatureBlock("sender_context", [f"ctx_s_{i}" for i in range(context_width)],
                         [False] * context_width),
            FeatureBlock("receiver_context", [f"ctx_r_{i}" for i in range(context_width)],
                         [False] * context_width),
        ]
        self.context_width = context_width
        self.main_mean = np.asarray(main_mean, dtype=np.float64)
        self.main_std = np.maximum(np.asarray(main_std, dtype=np.float64), STD_FLOOR)
        self.profile_mean = np.asarray(profile_mean, dtype=np.float64)
        self.profile_std = np.maximum(np.asarray(profile_std, dtype=np.float64), STD_FLOOR)
        self.vocab = vocab
        self.profile_slots = profile_slot_names()
        self.main_normalize = np.array(tx_norm + risk_norm + derived_norm)
        self.profile_normalize = np.array(
            [any(s.startswith(p) for p in _PROFILE_NORMALIZE_PREFIXES) for s in self.profile_slots]
        )

    # --- widths and offsets -------------------------------------------

    @property
    def main_width(self) -> int:
        return sum(b.width for b in self.blocks[:3])

    @property
    def total_width(self) -> int:
        return sum(b.width for b in self.blocks)

    def block_slice(self, name: str) -> slice:
        offset = 0
        for block in self.blocks:
            if block.name == name:
                return slice(offset, offset + block.width)
            offset += block.width
        raise KeyError(name)

    # --- normalization --------------------------------------------------

    def normalize_main(self, rows: np.ndarray) -> np.ndarray:
        out = np.array(rows, dtype=np.float64, copy=True)
        mask = self.main_normalize
        out[..., mask] = (out[..., mask] - self.main_mean[mask]) / self.main_std[mask]
        return out

    def normalize_profile(self, rows: np.ndarray) -> np.ndarray:
        out = np.array(rows, dtype=np.float64, copy=True)
        mask = self.profile_normalize
        out[..., mask] = (out[..., mask] - self.profile_mean[mask]) / self.profile_std[mask]
        return out

    # --- versioning ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "context_width": self.context_width,
            "blocks": [
                {"name": b.name, "slots": b.slots, "normalize": b.normalize}
                for b in self.blocks
            ],
            "profile_slots": self.profile_slots,
            "main_mean": self.main_mean.tolist(),
            "main_std": self.main_std.tolist(),
            "profile_mean": self.profile_mean.tolist(),
            "profile_std": self.profile_std.tolist(),
            "vocab": self.vocab.to_json(),
        }

    @property
    def version_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, raw: dict) -> "FeatureSchema":
        schema = cls(
            context_width=raw["context_width"],
            main_mean=np.array(raw["main_mean"]),
            main_std=np.array(raw["main_std"]),
            profile_mean=np.array(raw["profile_mean"]),
            profile_std=np.array(raw["profile_std"]),
            vocab=TypeVocabulary.from_json(raw["vocab"]),
        )
        if raw["version"] != SCHEMA_VERSION:
            raise SchemaMismatchError(f"unsupported schema version {raw['version']}")
        return schema

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- fitted artifacts ------------------------------------------------------


@dataclass
class FittedArtifacts:
    """Everything fitted on the training partition, then frozen."""

    thresholds: SizeThresholds
    vocab: TypeVocabulary
    class_model: ClassModel
    risk_tables: RiskTables
    rate_table: RateTable


def stratified_split(
    labels: np.ndarray, test_fraction: float = 0.2, seed: int = 7140
) -> tuple[np.ndarray, np.ndarray]:
    """80-20 random split stratified by label at a fixed seed."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=bool)
    train_parts, test_parts = [], []
    for value in (False, True):
        pool = np.flatnonzero(labels == value)
        pool = pool[rng.permutation(pool.size)]
        n_test = int(round(pool.size * test_fraction))
        test_parts.append(pool[:n_test])
        train_parts.append(pool[n_test:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def fit_artifacts(
    store: TransactionStore,
    rate_table: RateTable,
    train_idx: np.ndarray,
    smoothing: float = 1.0,
    volume_buckets: int = 4,
    count_buckets: int = 4,
    vocab_size: int = 64,
) -> FittedArtifacts:
    """Fit thresholds, vocabulary, class grid, and risk tables from the
    training rows only."""
    train_records = [store.records[i] for i in train_idx]
    thresholds = fit_size_thresholds(train_records, rate_table)
    vocab = fit_type_vocabulary(train_records, thresholds, rate_table, size=vocab_size)
    train_store = TransactionStore(sorted(train_records, key=lambda r: r.timestamp))
    profiles = build_profiles(train_store, thresholds, rate_table)
    class_model = assign_classes(profiles, volume_buckets, count_buckets)
    risk_tables = fit_risk_tables(train_records, rate_table, smoothing=smoothing)
    return FittedArtifacts(thresholds, vocab, class_model, risk_tables, rate_table)


# --- raw feature extraction --------------------------------------------------


@dataclass
class DerivedFeatures:
    partner_gap_seconds: int | None
    size_bucket: SizeBucket
    cross_bank: bool
    cross_currency: bool


@dataclass
class RawFeatures:
    """Unnormalized per-transaction features aligned with store positions."""

    main: np.ndarray  # (n, tx+risk+derived)
    sender_profile: np.ndarray  # (n, PROFILE_WIDTH)
    receiver_profile: np.ndarray  # (n, PROFILE_WIDTH)
    labels: np.ndarray  # (n,) bool
    composites: np.ndarray  # (n,)
    positions: np.ndarray  # (n,) store row index


def _tx_block_values(txn: TransactionRecord, usd_paid: float) -> list[float]:
    ccy_hot = [0.0] * (len(CURRENCIES) + 1)
    ccy_hot[CURRENCIES.index(txn.payment_currency)] = 1.0
    fmt_hot = [0.0] * (len(FORMATS) + 1)
    fmt_hot[FORMATS.index(txn.payment_format)] = 1.0
    hour = (txn.timestamp // 3600) % 24
    day = (txn.timestamp // 86400 + 4) % 7  # epoch day 0 was a Thursday
    return ccy_hot + fmt_hot + [usd_paid, float(np.log1p(usd_paid)), float(hour), float(day)]


def _derived_block_values(derived: DerivedFeatures) -> list[float]:
    gap = derived.partner_gap_seconds
    freq_hot = [0.0] * len(FREQ_LABELS)
    freq_hot[frequency_bucket(gap)] = 1.0
    size_hot = [0.0] * len(SIZE_BUCKETS)
    size_hot[SIZE_BUCKETS.index(derived.size_bucket)] = 1.0
    return (
        [float(gap) if gap is not None else 0.0, 1.0 if gap is None else 0.0]
        + freq_hot
        + size_hot
        + [1.0 if derived.cross_bank else 0.0, 1.0 if derived.cross_currency else 0.0]
    )


def _risk_block_values(risk: RiskFeatures) -> list[float]:
    return risk.values() + [risk.composite]


def extract_features(store: TransactionStore, artifacts: FittedArtifacts) -> RawFeatures:
    """Replay the stream once, emitting causal features for every row.

    Each row's profile vectors and pair gap reflect only transactions that
    precede it in the stream; the row itself is folded in afterwards.
    """
    rate_table = artifacts.rate_table
    thresholds = artifacts.thresholds
    n = len(store)
    tx_width = len(_tx_slots()[0])
    risk_width = len(_risk_slots()[0])
    derived_width = len(_derived_slots()[0])
    main = np.zeros((n, tx_width + risk_width + derived_width))
    sender_rows = np.zeros((n, PROFILE_WIDTH))
    receiver_rows = np.zeros((n, PROFILE_WIDTH))
    labels = np.zeros(n, dtype=bool)
    composites = np.zeros(n)

    profiles: dict = {}
    pair_last_ts: dict = {}

    for i, txn in enumerate(store):
        sender, receiver = txn.sender, txn.receiver
        usd_paid_dec = to_usd(txn.amount_paid, txn.payment_currency, rate_table)
        usd_paid = float(usd_paid_dec)

        gap = None
        previous = pair_last_ts.get((sender, receiver))
        if previous is not None:
            gap = txn.timestamp - previous

        risk = risk_features(txn, gap, artifacts.risk_tables, rate_table)
        derived = DerivedFeatures(
            partner_gap_seconds=gap,
            size_bucket=thresholds.bucket(usd_paid_dec),
            cross_bank=txn.from_bank != txn.to_bank,
            cross_currency=txn.payment_currency != txn.receiving_currency,
        )
        main[i] = (
            _tx_block_values(txn, usd_paid)
            + _risk_block_values(risk)
            + _derived_block_values(derived)
        )
        sender_rows[i] = profile_feature_vector(
            profiles.get(sender), artifacts.class_model, artifacts.vocab
        )
        receiver_rows[i] = profile_feature_vector(
            profiles.get(receiver), artifacts.class_model, artifacts.vocab
        )
        labels[i] = txn.is_laundering
        composites[i] = risk.composite

        for account, direction in ((sender, "out"), (receiver, "in")):
            profile = profiles.get(account)
            if profile is None:
                profile = profiles[account] = AccountProfile(account)
            update_profile(profile, txn, direction, thresholds, rate_table)
        pair_last_ts[(sender, receiver)] = txn.timestamp

    return RawFeatures(
        main=main,
        sender_profile=sender_rows,
        receiver_profile=receiver_rows,
        labels=labels,
        composites=composites,
        positions=np.arange(n),
    )


def fit_schema(raw: RawFeatures, train_idx: np.ndarray, context_width: int,
               vocab: TypeVocabulary) -> FeatureSchema:
    """Compute normalization statistics over training rows only."""
    main_train = raw.main[train_idx]
    profile_train = np.vstack([raw.sender_profile[train_idx], raw.receiver_profile[train_idx]])
    return FeatureSchema(
        context_width=context_width,
        main_mean=main_train.mean(axis=0),
        main_std=main_train.std(axis=0),
        profile_mean=profile_train.mean(axis=0),
        profile_std=profile_train.std(axis=0),
        vocab=vocab,
    )


@dataclass
class AssembledDataset:
    """Normalized matrices ready for training, plus split indices."""

    schema: FeatureSchema
    main: np.ndarray  # normalized
    sender_profile: np.ndarray  # normalized
    receiver_profile: np.ndarray  # normalized
    labels: np.ndarray
    composites: np.ndarray
    positions: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    tag: str = ""

    @classmethod
    def build(
        cls,
        raw: RawFeatures,
        schema: FeatureSchema,
        train_idx: np.ndarray,
        val_idx: np.ndarray,
        tag: str = "",
    ) -> "AssembledDataset":
        return cls(
            schema=schema,
            main=schema.normalize_main(raw.main),
            sender_profile=schema.normalize_profile(raw.sender_profile),
            receiver_profile=schema.normalize_profile(raw.receiver_profile),
            labels=np.asarray(raw.labels, dtype=bool),
            composites=np.asarray(raw.composites, dtype=np.float64),
            positions=np.asarray(raw.positions),
            train_idx=np.asarray(train_idx),
            val_idx=np.asarray(val_idx),
            tag=tag,
        )


def assemble_input(
    txn: TransactionRecord,
    risk: RiskFeatures,
    derived: DerivedFeatures,
    sender_ctx: np.ndarray,
    receiver_ctx: np.ndarray,
    schema: FeatureSchema,
    rate_table: RateTable,
) -> np.ndarray:
    """Concatenate the normalized feature blocks in schema order.

    Context embeddings arrive already encoded (they are bounded by Tanh)
    and pass through unscaled.
    """
    sender_ctx = np.asarray(sender_ctx, dtype=np.float64)
    receiver_ctx = np.asarray(receiver_ctx, dtype=np.float64)
    if sender_ctx.shape[-1] != schema.context_width or receiver_ctx.shape[-1] != schema.context_width:
        raise ValueError(
            f"context width {sender_ctx.shape[-1]}/{receiver_ctx.shape[-1]} "
            f"does not match schema ({schema.context_width})"
        )
    usd_paid = float(to_usd(txn.amount_paid, txn.payment_currency, rate_table))
    raw_main = np.array(
        _tx_block_values(txn, usd_paid)
        + _risk_block_values(risk)
        + _derived_block_values(derived),
        dtype=np.float64,
    )
    return np.concatenate([schema.normalize_main(raw_main), sender_ctx, receiver_ctx])
