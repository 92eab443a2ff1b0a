"""Risk table fitting, per-transaction features, and the composite filter."""

import math
import random
from collections import Counter
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from crpaml.metrics import minority_f1
from crpaml.riskmodel import (
    BANK_RELATIONS,
    FREQ_LABELS,
    NEG_INF,
    VOLUME_LABELS,
    RiskTables,
    apply_risk_filter,
    bank_relation,
    calibrate_filter_threshold,
    fit_risk_tables,
    frequency_bucket,
    pair_gaps,
    risk_features,
    volume_bucket,
)
from crpaml.synthgen import SynthConfig, generate
from crpaml.txstore import DEFAULT_RATES, PaymentFormat, TransactionRecord, to_usd


def txn(ts, frm="a", to="b", amount="500.00", fmt=PaymentFormat.ACH,
        pay_ccy="US Dollar", recv_ccy=None, from_bank="B1", to_bank="B1",
        laundering=False):
    recv_ccy = recv_ccy or pay_ccy
    return TransactionRecord(
        timestamp=ts,
        from_bank=from_bank,
        from_account=frm,
        to_bank=to_bank,
        to_account=to,
        amount_received=Decimal(amount),
        receiving_currency=recv_ccy,
        amount_paid=Decimal(amount),
        payment_currency=pay_ccy,
        payment_format=fmt,
        is_laundering=laundering,
    )


def reference_tables(prior=0.001) -> RiskTables:
    """Tables loaded with the published magnitudes, for lookup-path tests."""
    return RiskTables(
        p_launder_given_format={
            "Reinvestment": 0.0, "Cheque": 1.7e-4, "Credit Card": 1.6e-4,
            "ACH": 7.5e-3, "Cash": 2.2e-4, "Wire": 0.0, "Bitcoin": 3.8e-4,
        },
        p_launder_given_currency={"Saudi Riyal": 3.8e-2, "Bitcoin": 4.0e-4, "US Dollar": 7.5e-3},
        p_launder_given_volume_bucket=[1.1e-4, 4.1e-4, 1.8e-3, 4.4e-3, 3.7e-4, 4.5e-4],
        freq_bucket_dist=[(0.20, 0.80), (0.47, 0.07), (0.14, 0.11), (0.19, 0.02)],
        p_launder_given_bank_relation={
            "same_bank": 2.0e-5, "cross_bank_same_currency": 9.99e-4, "cross_currency": 1e-6,
        },
        prior=prior,
        smoothing=1.0,
        training_size=1_000_000,
        category_totals={},
    )


class TestFitRiskTables:
    def test_ach_laplace_toy_case(self):
        records = [
            txn(60, laundering=True),
            txn(120),
            txn(180),
            txn(240),
        ]
        tables = fit_risk_tables(records, DEFAULT_RATES, smoothing=1)
        assert tables.p_launder_given_format["ACH"] == pytest.approx(2 / 6)
        assert tables.prior == 0.25

    def test_empty_training_set_errors(self):
        with pytest.raises(ValueError):
            fit_risk_tables([], DEFAULT_RATES)

    def test_oracle_equivalence_on_synthetic_set(self):
        store, _ = generate(SynthConfig(n_accounts=100, n_background_txns=1000, illicit_ratio=0.02, seed=3))
        records = store.records
        s = 1.0
        tables = fit_risk_tables(records, DEFAULT_RATES, smoothing=s)

        # brute-force Laplace counting, written independently
        fmt_total, fmt_hit = Counter(), Counter()
        ccy_total, ccy_hit = Counter(), Counter()
        vol_total, vol_hit = Counter(), Counter()
        rel_total, rel_hit = Counter(), Counter()
        for r in records:
            usd = to_usd(r.amount_paid, r.payment_currency, DEFAULT_RATES)
            keys = (
                ("fmt", r.payment_format.value),
                ("ccy", r.payment_currency),
                ("vol", volume_bucket(usd)),
                ("rel", bank_relation(r)),
            )
            for kind, key in keys:
                total = {"fmt": fmt_total, "ccy": ccy_total, "vol": vol_total, "rel": rel_total}[kind]
                hit = {"fmt": fmt_hit, "ccy": ccy_hit, "vol": vol_hit, "rel": rel_hit}[kind]
                total[key] += 1
                if r.is_laundering:
                    hit[key] += 1

        for fmt, p in tables.p_launder_given_format.items():
            assert p == (fmt_hit[fmt] + s) / (fmt_total[fmt] + 2 * s)
        for ccy, p in tables.p_launder_given_currency.items():
            assert p == (ccy_hit[ccy] + s) / (ccy_total[ccy] + 2 * s)
        for i, p in enumerate(tables.p_launder_given_volume_bucket):
            assert p == (vol_hit[i] + s) / (vol_total[i] + 2 * s)
        for rel, p in tables.p_launder_given_bank_relation.items():
            assert p == (rel_hit[rel] + s) / (rel_total[rel] + 2 * s)

    def test_count_conservation(self):
        store, _ = generate(SynthConfig(n_accounts=100, n_background_txns=1000, illicit_ratio=0.02, seed=3))
        tables = fit_risk_tables(store.records, DEFAULT_RATES)
        n = len(store.records)
        for name in ("format", "currency", "volume_usd", "frequency", "bank_relation"):
            assert sum(tables.category_totals[name].values()) == n

    def test_freq_shares_sum_to_one_per_class(self):
        store, _ = generate(SynthConfig(n_accounts=100, n_background_txns=1000, illicit_ratio=0.02, seed=3))
        tables = fit_risk_tables(store.records, DEFAULT_RATES)
        assert sum(n for n, _ in tables.freq_bucket_dist) == pytest.approx(1.0, abs=1e-9)
        assert sum(l for _, l in tables.freq_bucket_dist) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(
        s1=st.floats(min_value=0.0, max_value=50.0),
        s2=st.floats(min_value=0.0, max_value=50.0),
        hits=st.integers(min_value=0, max_value=10),
        total=st.integers(min_value=10, max_value=1000),
    )
    def test_smoothing_monotone_toward_half(self, s1, s2, hits, total):
        lo, hi = sorted((s1, s2))
        p_lo = (hits + lo) / (total + 2 * lo)
        p_hi = (hits + hi) / (total + 2 * hi)
        assert 0.0 <= p_lo <= 1.0 and 0.0 <= p_hi <= 1.0
        assert abs(p_hi - 0.5) <= abs(p_lo - 0.5) + 1e-12

    def test_json_roundtrip(self, tmp_path):
        store, _ = generate(SynthConfig(n_accounts=100, n_background_txns=1000, illicit_ratio=0.02, seed=3))
        tables = fit_risk_tables(store.records, DEFAULT_RATES)
        path = tmp_path / "tables.json"
        tables.save(path)
        again = RiskTables.load(path)
        assert again == tables


class TestRiskFeatures:
    def test_volume_lookup_matches_published_band(self):
        tables = reference_tables()
        t = txn(60, amount="17000.00")  # 10k-25k USD band
        features = risk_features(t, None, tables, DEFAULT_RATES)
        assert features.r_volume == pytest.approx(4.4e-3)
        assert volume_bucket(Decimal("17000")) == VOLUME_LABELS.index("<=25000")

    def test_one_time_bayes_posterior(self):
        tables = reference_tables(prior=0.001)
        t = txn(60)
        features = risk_features(t, None, tables, DEFAULT_RATES)
        expected = (0.8 * 0.001) / (0.8 * 0.001 + 0.2 * 0.999)
        assert features.r_freq_posterior == pytest.approx(expected)
        assert features.r_freq_posterior == pytest.approx(3.99e-3, rel=5e-3)

    def test_bank_relation_lookups(self):
        tables = reference_tables()
        same = risk_features(txn(60), None, tables, DEFAULT_RATES)
        assert same.r_bank == pytest.approx(2.0e-5)
        cross = risk_features(txn(60, to_bank="B2"), None, tables, DEFAULT_RATES)
        assert cross.r_bank == pytest.approx(9.99e-4)
        fx = risk_features(txn(60, recv_ccy="Euro"), None, tables, DEFAULT_RATES)
        assert fx.r_bank == pytest.approx(1e-6)

    def test_composite_zero_when_all_indicators_at_prior(self):
        prior = 0.01
        tables = RiskTables(
            p_launder_given_format={f.value: prior for f in PaymentFormat},
            p_launder_given_currency={"US Dollar": prior},
            p_launder_given_volume_bucket=[prior] * 6,
            freq_bucket_dist=[(0.25, 0.25)] * 4,  # posterior collapses to prior
            p_launder_given_bank_relation={r: prior for r in BANK_RELATIONS},
            prior=prior,
            smoothing=1.0,
            training_size=1000,
            category_totals={},
        )
        features = risk_features(txn(60), None, tables, DEFAULT_RATES)
        assert features.composite == pytest.approx(0.0, abs=1e-12)

    def test_unseen_category_gets_prior_floor(self):
        tables = reference_tables(prior=0.001)
        t = txn(60, pay_ccy="Yen", recv_ccy="Yen")  # Yen absent from the currency table
        features = risk_features(t, None, tables, DEFAULT_RATES)
        assert features.r_currency == tables.unseen_probability()
        assert features.r_currency == max(tables.prior, tables.floor)

    def test_composite_additivity(self):
        tables = reference_tables(prior=0.001)
        features = risk_features(txn(60, amount="17000.00"), 3600, tables, DEFAULT_RATES)
        contributions = features.contributions(tables)
        assert sum(contributions.values()) == pytest.approx(features.composite)
        for name, r in zip(
            ("format", "currency", "volume", "frequency", "bank_relation"), features.values()
        ):
            assert contributions[name] == pytest.approx(math.log(tables.clamp(r) / tables.prior))

    def test_zero_probability_entries_are_floored_not_infinite(self):
        tables = reference_tables()
        t = txn(60, fmt=PaymentFormat.WIRE)  # published table holds an exact zero
        features = risk_features(t, None, tables, DEFAULT_RATES)
        assert math.isfinite(features.composite)

    def test_frequency_bucketing(self):
        assert frequency_bucket(None) == FREQ_LABELS.index("one_time")
        assert frequency_bucket(0) == FREQ_LABELS.index("0-8h")
        assert frequency_bucket(8 * 3600 - 1) == FREQ_LABELS.index("0-8h")
        assert frequency_bucket(8 * 3600) == FREQ_LABELS.index("8-24h")
        assert frequency_bucket(24 * 3600) == FREQ_LABELS.index(">24h")

    def test_pair_gaps_causal(self):
        rows = [txn(60, "a", "b"), txn(120, "b", "a"), txn(300, "a", "b")]
        assert pair_gaps(rows) == [None, None, 240]


class TestCalibration:
    def test_neg_inf_candidate_never_hurts(self):
        predictions = [True, True, False, True]
        composites = [5.0, -2.0, 0.0, 3.0]
        labels = [True, False, False, True]
        before = minority_f1(predictions, labels)
        tau = calibrate_filter_threshold(predictions, composites, labels)
        after = minority_f1(apply_risk_filter(predictions, composites, tau), labels)
        assert after >= before

    def test_perfectly_separating_composites_recover_precision(self):
        labels = [True] * 5 + [False] * 20
        predictions = [True] * 25  # everything flagged
        composites = [10.0] * 5 + [-10.0] * 20
        tau = calibrate_filter_threshold(predictions, composites, labels)
        filtered = apply_risk_filter(predictions, composites, tau)
        assert filtered == labels
        assert minority_f1(filtered, labels) == 1.0

    def test_no_positive_predictions_gives_neg_inf(self):
        assert calibrate_filter_threshold([False, False], [1.0, 2.0], [True, False]) == NEG_INF

    def test_matches_exhaustive_sweep_oracle(self):
        rng = random.Random(11)
        n = 1000
        labels = [rng.random() < 0.1 for _ in range(n)]
        predictions = [rng.random() < 0.3 or l for l in labels]
        composites = [rng.gauss(2.0 if l else 0.0, 1.5) for l in labels]
        tau = calibrate_filter_threshold(predictions, composites, labels)

        best_f1, best_tau = -1.0, NEG_INF
        for candidate in [NEG_INF] + sorted(set(composites)):
            f1 = minority_f1(apply_risk_filter(predictions, composites, candidate), labels)
            if f1 > best_f1:
                best_f1, best_tau = f1, candidate
        assert tau == best_tau
        got = minority_f1(apply_risk_filter(predictions, composites, tau), labels)
        assert got == pytest.approx(best_f1)


class TestApplyFilter:
    def test_neg_inf_is_identity(self):
        predictions = [True, False, True]
        assert apply_risk_filter(predictions, [0.0, 1.0, -5.0], NEG_INF) == predictions

    def test_single_low_composite_positive_demoted(self):
        assert apply_risk_filter([True], [1.0], 2.0) == [False]

    def test_negatives_never_flipped(self):
        assert apply_risk_filter([False], [100.0], -10.0) == [False]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_risk_filter([True], [1.0, 2.0], 0.0)

    def test_confusion_delta_matches_bruteforce_recount(self):
        rng = random.Random(5)
        n = 500
        labels = [rng.random() < 0.2 for _ in range(n)]
        predictions = [rng.random() < 0.4 for _ in range(n)]
        composites = [rng.uniform(-3, 3) for _ in range(n)]
        tau = 0.5
        filtered = apply_risk_filter(predictions, composites, tau)
        for before, after, c in zip(predictions, filtered, composites):
            if before and c < tau:
                assert not after
            else:
                assert after == before
