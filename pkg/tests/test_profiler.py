"""Profile folding, feature vectors, thresholds, and account classes."""

import copy
from collections import Counter, defaultdict
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from crpaml.profiler import (
    CURRENCIES,
    FORMATS,
    PROFILE_WIDTH,
    SIZE_BUCKETS,
    AccountProfile,
    SizeBucket,
    SizeThresholds,
    TxCategory,
    assign_classes,
    build_profiles,
    categorize,
    fit_size_thresholds,
    fit_type_vocabulary,
    nearest_rank,
    profile_feature_vector,
    profile_slot_names,
    update_profile,
)
from crpaml.synthgen import SynthConfig, generate
from crpaml.txstore import (
    DEFAULT_RATES,
    AccountId,
    OrderingError,
    PaymentFormat,
    TransactionRecord,
    TransactionStore,
    to_usd,
)


def usd_txn(ts, frm, to, amount, fmt=PaymentFormat.ACH, laundering=False):
    return TransactionRecord(
        timestamp=ts,
        from_bank="B1",
        from_account=frm,
        to_bank="B1",
        to_account=to,
        amount_received=Decimal(amount),
        receiving_currency="US Dollar",
        amount_paid=Decimal(amount),
        payment_currency="US Dollar",
        payment_format=fmt,
        is_laundering=laundering,
    )


THRESHOLDS = SizeThresholds(Decimal(100), Decimal(1000), Decimal(10000))


class TestSizeThresholds:
    def test_degenerate_distribution(self):
        records = [usd_txn(60 * i, "a", "b", "100.00") for i in range(5)]
        t = fit_size_thresholds(records, DEFAULT_RATES)
        assert (t.p50_usd, t.p80_usd, t.p93_usd) == (Decimal(100), Decimal(100), Decimal(100))

    def test_uniform_1_to_100(self):
        records = [usd_txn(60 * i, "a", "b", str(i + 1)) for i in range(100)]
        t = fit_size_thresholds(records, DEFAULT_RATES)
        assert (t.p50_usd, t.p80_usd, t.p93_usd) == (Decimal(50), Decimal(80), Decimal(93))

    def test_empty_store_errors(self):
        with pytest.raises(ValueError):
            fit_size_thresholds([], DEFAULT_RATES)

    def test_bucket_edges_inclusive(self):
        assert THRESHOLDS.bucket(Decimal(100)) is SizeBucket.SMALL
        assert THRESHOLDS.bucket(Decimal("100.01")) is SizeBucket.MEDIUM
        assert THRESHOLDS.bucket(Decimal(1000)) is SizeBucket.MEDIUM
        assert THRESHOLDS.bucket(Decimal(10000)) is SizeBucket.LARGE
        assert THRESHOLDS.bucket(Decimal("10000.01")) is SizeBucket.EXTRA_LARGE

    @settings(max_examples=100, deadline=None)
    @given(
        usd=st.decimals(min_value="0.01", max_value="9999999", places=2),
        bump=st.decimals(min_value="0.01", max_value="9999999", places=2),
    )
    def test_bucket_monotonic_in_amount(self, usd, bump):
        order = list(SizeBucket)
        low = order.index(THRESHOLDS.bucket(usd))
        high = order.index(THRESHOLDS.bucket(usd + bump))
        assert high >= low


class TestUpdateProfile:
    def test_first_transaction(self):
        profile = AccountProfile(AccountId("B1", "a"))
        update_profile(profile, usd_txn(1000, "a", "b", "50.00"), "out", THRESHOLDS, DEFAULT_RATES)
        assert profile.n_out == 1 and profile.n_in == 0
        assert len(profile.partners) == 1
        assert profile.sum_gaps() == 0
        assert profile.sum_out_usd == Decimal(50)

    def test_interarrival_sum_for_repeat_partner(self):
        profile = AccountProfile(AccountId("B1", "a"))
        update_profile(profile, usd_txn(1000, "a", "b", "50.00"), "out", THRESHOLDS, DEFAULT_RATES)
        update_profile(profile, usd_txn(4600, "a", "b", "70.00"), "out", THRESHOLDS, DEFAULT_RATES)
        assert profile.sum_gaps() == 3600
        assert profile.gap_events() == 1

    def test_no_gap_for_distinct_partners(self):
        profile = AccountProfile(AccountId("B1", "a"))
        update_profile(profile, usd_txn(1000, "a", "b", "50.00"), "out", THRESHOLDS, DEFAULT_RATES)
        update_profile(profile, usd_txn(4600, "a", "c", "70.00"), "out", THRESHOLDS, DEFAULT_RATES)
        assert profile.sum_gaps() == 0

    def test_out_of_order_rejected(self):
        profile = AccountProfile(AccountId("B1", "a"))
        update_profile(profile, usd_txn(1000, "a", "b", "50.00"), "out", THRESHOLDS, DEFAULT_RATES)
        with pytest.raises(OrderingError):
            update_profile(profile, usd_txn(999, "a", "b", "50.00"), "out", THRESHOLDS, DEFAULT_RATES)

    def test_counter_invariants_hold(self):
        store, _ = generate(SynthConfig(n_accounts=60, n_background_txns=800, illicit_ratio=0.01, seed=4))
        profiles = build_profiles(store, THRESHOLDS, DEFAULT_RATES)
        for profile in profiles.values():
            assert profile.n_total == sum(profile.category_hist.values())
            assert profile.n_total == sum(p.count for p in profile.partners.values())


class TestIncrementalBatchEquivalence:
    def test_replay_equals_batch_recomputation(self):
        store, _ = generate(SynthConfig(n_accounts=80, n_background_txns=1000, illicit_ratio=0.01, seed=6))
        # incremental: fold transaction by transaction
        incremental = build_profiles(store, THRESHOLDS, DEFAULT_RATES)
        # batch oracle: recompute each account from its raw scan
        for account, profile in incremental.items():
            records = store.scan_account(account)
            fresh = AccountProfile(account)
            for txn in records:
                if txn.sender == account:
                    update_profile(fresh, txn, "out", THRESHOLDS, DEFAULT_RATES)
                if txn.receiver == account:
                    update_profile(fresh, txn, "in", THRESHOLDS, DEFAULT_RATES)
            assert fresh.n_in == profile.n_in and fresh.n_out == profile.n_out
            assert fresh.sum_in_usd == profile.sum_in_usd  # Decimal: exact
            assert fresh.category_hist == profile.category_hist
            assert fresh.partners == profile.partners

    def test_prefix_replay_equivalence(self):
        store, _ = generate(SynthConfig(n_accounts=40, n_background_txns=500, illicit_ratio=0.01, seed=2))
        cutoff = store.records[len(store) // 2].timestamp
        prefix = TransactionStore([r for r in store.records if r.timestamp < cutoff])
        assert build_profiles(store, THRESHOLDS, DEFAULT_RATES, until_timestamp=cutoff) == \
            build_profiles(prefix, THRESHOLDS, DEFAULT_RATES)


def brute_force_vector(store, account, class_model, vocab, thresholds):
    """Independent per-feature recomputation straight from the raw records."""
    records = [r for r in store.records if account in (r.sender, r.receiver)]
    n_in = sum(1 for r in records if r.receiver == account)
    n_out = sum(1 for r in records if r.sender == account)
    sum_in = sum(
        (to_usd(r.amount_received, r.receiving_currency, DEFAULT_RATES) for r in records if r.receiver == account),
        Decimal(0),
    )
    sum_out = sum(
        (to_usd(r.amount_paid, r.payment_currency, DEFAULT_RATES) for r in records if r.sender == account),
        Decimal(0),
    )
    by_partner = defaultdict(list)
    for r in records:
        partner = r.receiver if r.sender == account else r.sender
        by_partner[partner].append(r.timestamp)
    gaps = []
    for stamps in by_partner.values():
        stamps = sorted(stamps)
        gaps += [b - a for a, b in zip(stamps, stamps[1:])]
    mean_gap = sum(gaps) / len(gaps) if gaps else 0.0

    ccy_counts, fmt_counts, type_counts = Counter(), Counter(), Counter()
    for r in records:
        if r.sender == account:
            cat = categorize(r, "out", thresholds, DEFAULT_RATES)
            ccy_counts[cat.currency] += 1
            fmt_counts[r.payment_format] += 1
            type_counts[cat] += 1
        if r.receiver == account:
            cat = categorize(r, "in", thresholds, DEFAULT_RATES)
            ccy_counts[cat.currency] += 1
            fmt_counts[r.payment_format] += 1
            type_counts[cat] += 1

    vector = [
        float(n_in),
        float(n_out),
        float(sum_in / n_in) if n_in else 0.0,
        float(sum_out / n_out) if n_out else 0.0,
        float(mean_gap),
        1.0 if gaps else 0.0,
        float(len(by_partner)),
    ]
    ccy_hot = [0.0] * (len(CURRENCIES) + 1)
    if ccy_counts:
        top = min(ccy_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        ccy_hot[CURRENCIES.index(top)] = 1.0
    fmt_hot = [0.0] * (len(FORMATS) + 1)
    if fmt_counts:
        top = min(fmt_counts.items(), key=lambda kv: (-kv[1], kv[0].value))[0]
        fmt_hot[FORMATS.index(top)] = 1.0
    ranked = sorted(type_counts.items(), key=lambda kv: (-kv[1], kv[0][0].value, kv[0][1], kv[0][2].value))
    tops = [float(vocab.index(cat)) for cat, _ in ranked[:5]]
    tops += [-1.0] * (5 - len(tops))
    return vector + ccy_hot + fmt_hot + tops + class_model.row_for(account)


class TestProfileFeatureVector:
    def test_layout_width(self):
        assert PROFILE_WIDTH == len(profile_slot_names()) == 62

    def test_empty_profile_neutral_encoding(self):
        store, _ = generate(SynthConfig(n_accounts=40, n_background_txns=500, illicit_ratio=0.01, seed=2))
        profiles = build_profiles(store, THRESHOLDS, DEFAULT_RATES)
        vocab = fit_type_vocabulary(store.records, THRESHOLDS, DEFAULT_RATES)
        model = assign_classes(profiles)
        vector = profile_feature_vector(None, model, vocab)
        assert vector[:7] == [0.0] * 7
        hot = vector[7 : 7 + len(CURRENCIES) + 1 + len(FORMATS) + 1]
        assert hot == [0.0] * len(hot)
        assert vector[-26:] == model.stats[0].row()

    def test_single_transaction_forced_features(self):
        profile = AccountProfile(AccountId("B1", "a"))
        txn = usd_txn(1000, "a", "b", "500.00", fmt=PaymentFormat.ACH)  # medium under THRESHOLDS
        update_profile(profile, txn, "out", THRESHOLDS, DEFAULT_RATES)
        vocab = fit_type_vocabulary([txn], THRESHOLDS, DEFAULT_RATES)
        model = assign_classes({profile.account: profile})
        vector = profile_feature_vector(profile, model, vocab)
        names = profile_slot_names()
        assert vector[names.index("top_currency=US Dollar")] == 1.0
        assert vector[names.index("top_format=ACH")] == 1.0
        expected_type = TxCategory(SizeBucket.MEDIUM, "US Dollar", PaymentFormat.ACH)
        assert vector[names.index("top_type_0")] == float(vocab.index(expected_type))

    def test_50_account_set_matches_bruteforce(self):
        store, _ = generate(SynthConfig(n_accounts=50, n_background_txns=600, illicit_ratio=0.01, seed=8))
        thresholds = fit_size_thresholds(store.records, DEFAULT_RATES)
        profiles = build_profiles(store, thresholds, DEFAULT_RATES)
        vocab = fit_type_vocabulary(store.records, thresholds, DEFAULT_RATES)
        model = assign_classes(profiles)
        for account, profile in profiles.items():
            got = profile_feature_vector(profile, model, vocab)
            want = brute_force_vector(store, account, model, vocab, thresholds)
            assert got[:2] == want[:2]
            for g, w in zip(got, want):
                assert g == pytest.approx(w, rel=1e-9)


class TestCausality:
    def test_future_poison_transaction_is_invisible(self):
        store, _ = generate(SynthConfig(n_accounts=40, n_background_txns=500, illicit_ratio=0.01, seed=2))
        cutoff = store.records[-1].timestamp  # poison goes at/after this
        vocab = fit_type_vocabulary(store.records, THRESHOLDS, DEFAULT_RATES)
        target = store.records[0].sender

        clean = build_profiles(store, THRESHOLDS, DEFAULT_RATES, until_timestamp=cutoff)
        poison = usd_txn(cutoff + 1, target.account, "poison-sink", "99999.00")
        poisoned_store = TransactionStore(list(store.records) + [poison])
        poisoned = build_profiles(poisoned_store, THRESHOLDS, DEFAULT_RATES, until_timestamp=cutoff)

        model = assign_classes(clean)
        v_clean = profile_feature_vector(clean[target], model, vocab)
        v_poisoned = profile_feature_vector(poisoned[target], model, vocab)
        assert v_clean == v_poisoned


class TestAssignClasses:
    def test_distinct_volumes_grid_4x1(self):
        profiles = {}
        for i, amount in enumerate(("10.00", "100.00", "1000.00", "10000.00")):
            account = AccountId("B1", f"a{i}")
            profile = AccountProfile(account)
            update_profile(profile, usd_txn(60, f"a{i}", "z", amount), "out", THRESHOLDS, DEFAULT_RATES)
            profiles[account] = profile
        model = assign_classes(profiles, volume_buckets=4, count_buckets=1)
        ids = {model.class_of(a).class_id for a in profiles}
        assert len(ids) == 4  # one account per class

    def test_identical_accounts_single_class(self):
        profiles = {}
        for i in range(5):
            account = AccountId("B1", f"a{i}")
            profile = AccountProfile(account)
            update_profile(profile, usd_txn(60, f"a{i}", "z", "500.00"), "out", THRESHOLDS, DEFAULT_RATES)
            profiles[account] = profile
        model = assign_classes(profiles, 4, 4)
        ids = {model.class_of(a).class_id for a in profiles}
        assert ids == {0}
        stats = model.stats[0]
        assert stats.member_count == 5
        assert stats.avg_size_counts[SIZE_BUCKETS.index(SizeBucket.MEDIUM)] == 1.0
        assert stats.avg_format_counts[FORMATS.index(PaymentFormat.ACH)] == 1.0

    def test_class_totality(self):
        store, _ = generate(SynthConfig(n_accounts=200, n_background_txns=3000, illicit_ratio=0.01, seed=5))
        profiles = build_profiles(store, THRESHOLDS, DEFAULT_RATES)
        model = assign_classes(profiles, 4, 4)
        assert set(model.stats.keys()) == set(range(16))
        for account in profiles:
            cls = model.class_of(account)
            assert 0 <= cls.class_id < 16

    def test_200_account_grid_matches_groupby_oracle(self):
        store, _ = generate(SynthConfig(n_accounts=200, n_background_txns=3000, illicit_ratio=0.01, seed=5))
        thresholds = fit_size_thresholds(store.records, DEFAULT_RATES)
        profiles = build_profiles(store, thresholds, DEFAULT_RATES)
        model = assign_classes(profiles, 4, 4)

        by_class = defaultdict(list)
        for account in profiles:
            by_class[model.class_of(account).class_id].append(account)
        for class_id, accounts in by_class.items():
            # brute-force group-by from raw records
            fmt_sums = Counter()
            size_sums = Counter()
            for account in accounts:
                for r in store.scan_account(account):
                    directions = []
                    if r.sender == account:
                        directions.append("out")
                    if r.receiver == account:
                        directions.append("in")
                    for d in directions:
                        cat = categorize(r, d, thresholds, DEFAULT_RATES)
                        size_sums[cat.size_bucket] += 1
                        fmt_sums[r.payment_format] += 1
            stats = model.stats[class_id]
            for bucket in SizeBucket:
                assert stats.avg_size_counts[SIZE_BUCKETS.index(bucket)] == pytest.approx(
                    size_sums[bucket] / len(accounts)
                )
            for fmt in PaymentFormat:
                assert stats.avg_format_counts[FORMATS.index(fmt)] == pytest.approx(
                    fmt_sums[fmt] / len(accounts)
                )

    def test_invalid_grid_rejected(self):
        with pytest.raises(ValueError):
            assign_classes({}, 4, 4)
        profile = AccountProfile(AccountId("B1", "a"))
        with pytest.raises(ValueError):
            assign_classes({profile.account: profile}, 0, 4)

    def test_nearest_rank_reference_values(self):
        assert nearest_rank(list(range(1, 101)), 50) == 50
        assert nearest_rank(list(range(1, 101)), 93) == 93
        assert nearest_rank([7], 50) == 7
