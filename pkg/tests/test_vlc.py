import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdvsc.entropy_model import EntropyMap
from mdvsc.model_division import FeatureSet
from mdvsc.transform_codec import FeatureMap
from mdvsc.video_model import SymbolStream
from mdvsc.vlc import (
    Budget,
    MaskPlan,
    Payload,
    PayloadFormatError,
    apply_mask,
    build_mask,
    deserialize,
    serialize,
    trade_budget,
    zero_fill,
)


def make_set(values_per_map: list[np.ndarray], shape) -> FeatureSet:
    maps = [FeatureMap(np.asarray(v, dtype=np.float32).reshape(shape)) for v in values_per_map]
    return FeatureSet(common=maps[-1], individuals=tuple(maps[:-1]))


def make_entropies(bits_per_map: list[np.ndarray], shape):
    maps = [EntropyMap(bits=np.asarray(b, dtype=np.float64).reshape(shape)) for b in bits_per_map]
    return maps[-1], maps[:-1]


class TestBudget:
    def test_mode_validated(self):
        with pytest.raises(ValueError, match="mode"):
            Budget(mode="bogus")

    def test_ratio_bounds(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            Budget(mode="split", drop_common=1.5)

    def test_target_cbr_bounds(self):
        with pytest.raises(ValueError, match="target_cbr"):
            Budget(target_cbr=0.0)
        with pytest.raises(ValueError, match="target_cbr"):
            Budget(target_cbr=-0.01)

    def test_ratios_become_exact_fractions(self):
        b = Budget(mode="split", drop_common=0.1, drop_individual=0.3)
        assert b.drop_common == Fraction(1, 10)
        assert b.drop_individual == Fraction(3, 10)

    def test_symbol_budget_floor(self):
        b = Budget(target_cbr=0.01, source_dim=49_152)
        assert b.symbol_budget() == 491


class TestTradeBudget:
    def test_count_preserving_example(self):
        b = Budget(mode="split", drop_common=0.5, drop_individual=0.5, gop_size=4)
        t = trade_budget(b, 0.1)
        assert t.drop_common == Fraction(1, 10)
        assert t.drop_individual == Fraction(3, 5)
        # kept = (1-drc)*M + N*(1-dri)*M is invariant: 0.9 + 4*0.4 == 0.5 + 4*0.5
        m = 120
        kept_before = (1 - b.drop_common) * m + 4 * (1 - b.drop_individual) * m
        kept_after = (1 - t.drop_common) * m + 4 * (1 - t.drop_individual) * m
        assert kept_before == kept_after == 300

    def test_zero_delta_is_identity(self):
        b = Budget(mode="split", drop_common=0.25, drop_individual=0.5, gop_size=3)
        t = trade_budget(b, 0)
        assert t.drop_common == b.drop_common
        assert t.drop_individual == b.drop_individual

    def test_infeasible_trade_errors(self):
        b = Budget(mode="split", drop_common=0.1, drop_individual=0.5, gop_size=4)
        with pytest.raises(ValueError, match="infeasible trade"):
            trade_budget(b, 0.1)

    def test_needs_gop_size(self):
        with pytest.raises(ValueError, match="gop_size"):
            trade_budget(Budget(mode="split"), 0.1)

    @given(
        drc=st.fractions(0, 1, max_denominator=20),
        dri=st.fractions(0, 1, max_denominator=20),
        delta=st.fractions(Fraction(-1, 2), Fraction(1, 2), max_denominator=20),
        n=st.integers(1, 6),
        m=st.integers(1, 200),
    )
    @settings(max_examples=200, deadline=None)
    def test_total_kept_invariant(self, drc, dri, delta, n, m):
        b = Budget(mode="split", drop_common=drc, drop_individual=dri, gop_size=n)
        try:
            t = trade_budget(b, delta)
        except ValueError:
            return
        before = math.floor((1 - drc) * m + n * (1 - dri) * m)
        after = math.floor((1 - t.drop_common) * m + n * (1 - t.drop_individual) * m)
        assert before == after


class TestBuildMask:
    def test_topk_by_entropy(self):
        shape = (2, 2, 1)
        fset = make_set([[1, 2, 3, 4], [5, 6, 7, 8]], shape)
        ents = make_entropies([[3.0, 0.1, 2.0, 1.0], [0.0, 0.0, 0.0, 0.0]], shape)
        budget = Budget(mode="split", drop_common=1, drop_individual=0.5, gop_size=1)
        plan = build_mask(ents, budget, "entropy", fset)
        assert plan.kept_indices[0] == (0, 2)
        assert plan.kept_indices[1] == ()
        assert plan.total_kept == 2

    def test_inverse_entropy_flips_selection(self):
        shape = (2, 2, 1)
        fset = make_set([[1, 2, 3, 4], [5, 6, 7, 8]], shape)
        ents = make_entropies([[3.0, 0.1, 2.0, 1.0], [0.0, 0.0, 0.0, 0.0]], shape)
        budget = Budget(mode="split", drop_common=1, drop_individual=0.5, gop_size=1)
        plan = build_mask(ents, budget, "inv_entropy", fset)
        assert plan.kept_indices[0] == (1, 3)

    def test_split_counts_example(self):
        # 12 elements per map, N=2, both ratios 0.5 -> 6 per map, 18 total
        shape = (3, 4, 1)
        rng = np.random.default_rng(0)
        fset = make_set([rng.normal(size=12) for _ in range(3)], shape)
        ents = make_entropies([rng.uniform(size=12) for _ in range(3)], shape)
        budget = Budget(mode="split", drop_common=0.5, drop_individual=0.5, gop_size=2)
        plan = build_mask(ents, budget, "entropy", fset)
        assert [len(k) for k in plan.kept_indices] == [6, 6, 6]
        assert plan.total_kept == 18

    def test_global_topk_exact_budget(self):
        shape = (2, 2, 2)
        rng = np.random.default_rng(1)
        fset = make_set([rng.normal(size=8) for _ in range(3)], shape)
        ents = make_entropies([rng.uniform(size=8) for _ in range(3)], shape)
        budget = Budget(target_cbr=0.01, mode="global_topk", source_dim=1000)
        plan = build_mask(ents, budget, "entropy", fset)
        assert plan.total_kept == 10
        assert not plan.clipped

    def test_budget_beyond_available_keeps_all(self):
        shape = (2, 2, 1)
        rng = np.random.default_rng(2)
        fset = make_set([rng.normal(size=4) for _ in range(2)], shape)
        ents = make_entropies([rng.uniform(size=4) for _ in range(2)], shape)
        budget = Budget(target_cbr=1.0, mode="global_topk", source_dim=1000)
        plan = build_mask(ents, budget, "entropy", fset)
        assert plan.clipped
        assert plan.total_kept == 8

    def test_random_policy_needs_rng(self):
        shape = (2, 2, 1)
        rng = np.random.default_rng(3)
        fset = make_set([rng.normal(size=4) for _ in range(2)], shape)
        ents = make_entropies([rng.uniform(size=4) for _ in range(2)], shape)
        budget = Budget(target_cbr=0.5, mode="global_topk", source_dim=8)
        with pytest.raises(ValueError, match="rng"):
            build_mask(ents, budget, "random", fset)

    def test_ties_break_to_lowest_flat_index(self):
        shape = (1, 4, 1)
        fset = make_set([[1, 1, 1, 1], [1, 1, 1, 1]], shape)
        ents = make_entropies([[2.0, 2.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0]], shape)
        budget = Budget(target_cbr=Fraction(3, 8), mode="global_topk", source_dim=8)
        plan = build_mask(ents, budget, "entropy", fset)
        assert plan.kept_indices == ((0, 1, 2), ())

    def test_remainder_goes_to_highest_marginal_entropy(self):
        # quotas: common 1.5, individual 1.5 -> floor 1+1, total floor(3)=3;
        # the extra slot goes to the map whose next element has more bits
        shape = (1, 3, 1)
        fset = make_set([[1, 1, 1], [1, 1, 1]], shape)
        ents = make_entropies([[5.0, 4.0, 0.0], [9.0, 1.0, 0.0]], shape)
        budget = Budget(mode="split", drop_common=0.5, drop_individual=0.5, gop_size=1)
        plan = build_mask(ents, budget, "entropy", fset)
        assert plan.total_kept == 3
        # individual marginal (4.0) beats common marginal (1.0)
        assert [len(k) for k in plan.kept_indices] == [2, 1]

    @given(seed=st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_entropy_mask_optimality(self, seed):
        rng = np.random.default_rng(seed)
        shape = (2, 3, 1)
        fset = make_set([rng.normal(size=6) for _ in range(3)], shape)
        ents = make_entropies([rng.uniform(size=6) for _ in range(3)], shape)
        k = int(rng.integers(1, 18))
        budget = Budget(target_cbr=Fraction(k, 100), mode="global_topk", source_dim=100)
        plan = build_mask(ents, budget, "entropy", fset)
        bits = np.stack([e.bits.ravel() for e in [*ents[1], ents[0]]])
        kept_mask = np.zeros_like(bits, dtype=bool)
        for u, idxs in enumerate(plan.kept_indices):
            kept_mask[u, list(idxs)] = True
        if kept_mask.any() and (~kept_mask).any():
            assert bits[~kept_mask].max() <= bits[kept_mask].min() + 1e-12

    def test_split_respects_target_budget_cap(self):
        shape = (1, 4, 1)
        rng = np.random.default_rng(5)
        fset = make_set([rng.normal(size=4) for _ in range(2)], shape)
        ents = make_entropies([rng.uniform(size=4) for _ in range(2)], shape)
        budget = Budget(
            mode="split", drop_common=0, drop_individual=0, gop_size=1,
            target_cbr=0.01, source_dim=100,
        )
        with pytest.raises(ValueError, match="exceeding"):
            build_mask(ents, budget, "entropy", fset)


class TestApplyMaskZeroFill:
    def fixture_set(self, seed=0, shape=(2, 2, 2), n=2):
        rng = np.random.default_rng(seed)
        return make_set([rng.normal(size=8) for _ in range(n + 1)], shape)

    def keep_all_plan(self, fset):
        m = fset.map_numel
        return MaskPlan(
            kept_indices=tuple(tuple(range(m)) for _ in range(fset.gop_size + 1)),
            total_kept=m * (fset.gop_size + 1),
            map_numel=m,
        )

    def test_keep_all_flattens(self):
        fset = self.fixture_set()
        plan = self.keep_all_plan(fset)
        stream = apply_mask(fset, plan)
        assert stream.symbol_count == 3 * 8
        expected = np.concatenate([u.data.ravel() for u in fset.units()])
        assert np.array_equal(stream.symbols, expected.astype(np.float32))
        assert stream.per_unit_counts == (8, 8, 8)

    def test_empty_plan(self):
        fset = self.fixture_set()
        plan = MaskPlan(kept_indices=((), (), ()), total_kept=0, map_numel=8)
        stream = apply_mask(fset, plan)
        assert stream.symbol_count == 0
        assert stream.per_unit_counts == (0, 0, 0)

    def test_selected_values_in_flat_order(self):
        shape = (2, 2, 1)
        fset = make_set([[10, 20, 30, 40], [0, 0, 0, 0]], shape)
        plan = MaskPlan(kept_indices=((0, 2), ()), total_kept=2, map_numel=4)
        stream = apply_mask(fset, plan)
        assert np.array_equal(stream.symbols, [10.0, 30.0])

    def test_round_trip_keep_all(self):
        fset = self.fixture_set(seed=1)
        plan = self.keep_all_plan(fset)
        back = zero_fill(apply_mask(fset, plan), plan, fset.map_shape)
        assert np.array_equal(back.common.data, fset.common.data)
        for a, b in zip(back.individuals, fset.individuals):
            assert np.array_equal(a.data, b.data)

    def test_empty_plan_zero_fills(self):
        fset = self.fixture_set(seed=2)
        plan = MaskPlan(kept_indices=((), (), ()), total_kept=0, map_numel=8)
        back = zero_fill(apply_mask(fset, plan), plan, fset.map_shape)
        assert not back.common.data.any()

    def test_half_drop_leaves_expected_zeros(self):
        fset = self.fixture_set(seed=3)
        plan = MaskPlan(
            kept_indices=((0, 1, 2, 3), (4, 5, 6, 7), (0, 2, 4, 6)),
            total_kept=12,
            map_numel=8,
        )
        back = zero_fill(apply_mask(fset, plan), plan, fset.map_shape)
        for unit in [*back.individuals, back.common]:
            assert (unit.data.ravel() == 0).sum() == 4

    def test_length_mismatch_errors(self):
        fset = self.fixture_set(seed=4)
        plan = MaskPlan(kept_indices=((0,), (), ()), total_kept=1, map_numel=8)
        stream = SymbolStream(symbols=np.zeros(2, dtype=np.float32), per_unit_counts=(1, 1, 0))
        with pytest.raises(ValueError, match="symbols"):
            zero_fill(stream, plan, fset.map_shape)


def fuzz_payload(rng: np.random.Generator) -> Payload:
    n = int(rng.integers(1, 7))
    fh, fw, fc = (int(rng.integers(1, 5)) for _ in range(3))
    m = fh * fw * fc
    kept = []
    for _ in range(n + 1):
        count = int(rng.integers(0, m + 1))
        kept.append(tuple(sorted(rng.choice(m, size=count, replace=False).tolist())))
    total = sum(len(k) for k in kept)
    plan = MaskPlan(kept_indices=tuple(kept), total_kept=total, map_numel=m)
    body = rng.normal(size=total).astype(np.float32)
    return Payload(
        gop_id=int(rng.integers(0, 2 ** 31)),
        gop_size=n,
        feature_shape=(fh, fw, fc),
        frame_shape=(int(rng.integers(1, 512)), int(rng.integers(1, 512)), 3),
        scale=float(rng.uniform(0.01, 100)),
        plan=plan,
        body=body,
    )


class TestWireFormat:
    def test_round_trip(self):
        payload = fuzz_payload(np.random.default_rng(0))
        raw = serialize(payload)
        back = deserialize(raw)
        assert back.gop_id == payload.gop_id
        assert back.gop_size == payload.gop_size
        assert back.feature_shape == payload.feature_shape
        assert back.frame_shape == payload.frame_shape
        assert back.scale == payload.scale
        assert back.plan == payload.plan
        assert np.array_equal(back.body, payload.body)
        assert serialize(back) == raw

    def test_header_only_payload(self):
        plan = MaskPlan(kept_indices=((), ()), total_kept=0, map_numel=4)
        payload = Payload(
            gop_id=7, gop_size=1, feature_shape=(2, 2, 1), frame_shape=(32, 32, 3),
            scale=1.0, plan=plan, body=np.empty(0, dtype=np.float32),
        )
        back = deserialize(serialize(payload))
        assert back.plan == plan
        assert back.body.size == 0

    def test_bitmap_size_formula(self):
        plan = MaskPlan(
            kept_indices=tuple(() for _ in range(7)), total_kept=0, map_numel=32_768
        )
        assert len(plan.to_bitmap()) == 28_672

    def test_bad_magic_offset_zero(self):
        with pytest.raises(PayloadFormatError, match="offset 0"):
            deserialize(b"XXXX" + bytes(40))

    def test_bad_version_offset_four(self):
        raw = bytearray(serialize(fuzz_payload(np.random.default_rng(1))))
        raw[4] = 99
        with pytest.raises(PayloadFormatError, match="offset 4"):
            deserialize(bytes(raw))

    def test_truncation_reports_offset(self):
        raw = serialize(fuzz_payload(np.random.default_rng(2)))
        with pytest.raises(PayloadFormatError) as err:
            deserialize(raw[:10])
        assert err.value.offset == 10

    def test_trailing_bytes_rejected(self):
        raw = serialize(fuzz_payload(np.random.default_rng(3)))
        with pytest.raises(PayloadFormatError, match="body length"):
            deserialize(raw + b"\x00\x00\x00\x00")

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_fuzzed(self, seed):
        payload = fuzz_payload(np.random.default_rng(seed))
        raw = serialize(payload)
        back = deserialize(raw)
        assert serialize(back) == raw
        assert np.array_equal(back.body, payload.body)
