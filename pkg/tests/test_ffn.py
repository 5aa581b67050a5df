import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditslim import ffn as F
from ditslim.errors import ContractError
from ditslim.ffn import align_budget, ffn_importance, greedy_diverse_select, neuron_records
from ditslim.tensor import seeded_rng


def simulate_selection(records, budget, tau):
    """Step-by-step restatement of the documented procedure, kept separate
    from the implementation: descending-importance visits, cosine skip rule,
    0.05 relaxation passes over the skipped candidates, terminal unfiltered
    pass."""
    order = sorted(records, key=lambda r: (-r.importance, r.neuron))
    chosen = []
    threshold = tau
    trace = []
    used_unfiltered = False

    def similarity(a, b):
        if a.signature.shape == b.signature.shape and (a.signature == b.signature).all():
            return math.inf
        na, nb = np.linalg.norm(a.signature), np.linalg.norm(b.signature)
        if na == 0 or nb == 0:
            return -1.0
        return float(a.signature @ b.signature / (na * nb))

    while True:
        trace.append(threshold)
        for cand in order:
            if len(chosen) == budget:
                break
            if any(cand.neuron == c.neuron for c in chosen):
                continue
            sims = [similarity(cand, c) for c in chosen]
            if sims and max(sims) > threshold:
                continue
            chosen.append(cand)
        if len(chosen) == budget:
            break
        if threshold >= 1.0:
            used_unfiltered = True
            for cand in order:
                if len(chosen) == budget:
                    break
                if any(cand.neuron == c.neuron for c in chosen):
                    continue
                chosen.append(cand)
            break
        threshold = min(1.0, threshold + 0.05)
    return sorted(c.neuron for c in chosen), trace, used_unfiltered


def random_records(n, seed, dim=6):
    rng = seeded_rng(seed)
    w_up = rng.normal(size=(n, dim))
    w_down = rng.normal(size=(dim, n))
    return neuron_records(0, w_up, w_down)


class TestImportance:
    def test_product_of_norms(self):
        w_up = np.zeros((2, 4))
        w_up[0] = [2.0, 0, 0, 0]
        w_down = np.zeros((4, 2))
        w_down[:, 0] = [3.0, 0, 0, 0]
        assert ffn_importance(w_up, w_down, 0) == 6.0

    def test_zero_row(self):
        w_up = np.zeros((2, 4))
        w_down = seeded_rng(0).normal(size=(4, 2))
        assert ffn_importance(w_up, w_down, 1) == 0.0

    def test_index_out_of_range(self):
        with pytest.raises(ContractError):
            ffn_importance(np.zeros((2, 4)), np.zeros((4, 2)), 2)

    def test_large_ffn_matches_naive_loop(self):
        rng = seeded_rng(1)
        w_up = rng.normal(size=(256, 16))
        w_down = rng.normal(size=(16, 256))
        records = neuron_records(0, w_up, w_down)
        for rec in records:
            up = math.sqrt(sum(w_up[rec.neuron, c] ** 2 for c in range(16)))
            down = math.sqrt(sum(w_down[r, rec.neuron] ** 2 for r in range(16)))
            assert abs(rec.importance - up * down) <= 1e-12
            assert abs(ffn_importance(w_up, w_down, rec.neuron) - up * down) <= 1e-12


class TestGreedySelection:
    def test_exact_duplicate_skipped(self):
        rng = seeded_rng(2)
        w_up = rng.normal(size=(2, 4))
        w_up[1] = w_up[0]
        w_down = rng.normal(size=(4, 2))
        w_down[:, 1] = w_down[:, 0]
        records = neuron_records(0, w_up, w_down)
        sel = greedy_diverse_select(records, budget=1, tau=0.9)
        assert sel.retained == [0]

    def test_orthogonal_signatures_take_top_by_importance(self):
        # distinct one-hot signatures: never similar, so no relaxation needed
        n = 6
        w_up = np.zeros((n, n))
        w_down = np.zeros((n, n))
        importances = [5.0, 3.0, 6.0, 1.0, 4.0, 2.0]
        for k, imp in enumerate(importances):
            w_up[k, k] = imp
            w_down[k, k] = 1.0
        records = neuron_records(0, w_up, w_down)
        sel = greedy_diverse_select(records, budget=3, tau=0.9)
        assert sel.retained == sorted([2, 0, 4])
        assert sel.relaxation_trace == [0.9]
        assert not sel.final_pass_unfiltered

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_procedural_simulation(self, seed):
        records = random_records(12, seed)
        sel = greedy_diverse_select(records, budget=6, tau=0.9)
        retained, trace, unfiltered = simulate_selection(records, 6, 0.9)
        assert sel.retained == retained
        assert sel.relaxation_trace == trace
        assert sel.final_pass_unfiltered == unfiltered

    def test_relaxation_on_collinear_family(self):
        # nearly collinear signatures force threshold relaxation
        rng = seeded_rng(3)
        base = rng.normal(size=10)
        w_up = np.stack([base + rng.normal(scale=1e-3, size=10) for _ in range(6)])
        w_down = np.stack([base + rng.normal(scale=1e-3, size=10) for _ in range(6)]).T
        records = neuron_records(0, w_up, w_down)
        sel = greedy_diverse_select(records, budget=4, tau=0.5)
        assert sel.achieved_budget == 4
        assert len(sel.relaxation_trace) > 1
        assert all(b > a for a, b in zip(sel.relaxation_trace, sel.relaxation_trace[1:]))

    def test_budget_over_count_rejected(self):
        with pytest.raises(ContractError):
            greedy_diverse_select(random_records(4, 4), budget=5, tau=0.9)

    def test_deterministic(self):
        records = random_records(12, 5)
        a = greedy_diverse_select(records, 6, 0.8)
        b = greedy_diverse_select(records, 6, 0.8)
        assert a.retained == b.retained and a.relaxation_trace == b.relaxation_trace

    def test_importance_scale_invariance(self):
        rng = seeded_rng(6)
        w_up = rng.normal(size=(12, 6))
        w_down = rng.normal(size=(6, 12))
        a = greedy_diverse_select(neuron_records(0, w_up, w_down), 6, 0.9)
        b = greedy_diverse_select(neuron_records(0, 3.0 * w_up, w_down), 6, 0.9)
        assert a.retained == b.retained

    def test_selected_pairs_respect_final_threshold(self):
        records = random_records(16, 7)
        sel = greedy_diverse_select(records, 8, 0.6)
        if sel.final_pass_unfiltered:
            return
        final_tau = sel.relaxation_trace[-1]
        by_id = {r.neuron: r for r in records}
        for a in sel.retained:
            for b in sel.retained:
                if a >= b:
                    continue
                za, zb = by_id[a].signature, by_id[b].signature
                cos = za @ zb / (np.linalg.norm(za) * np.linalg.norm(zb))
                assert cos <= final_tau + 1e-12


class TestAlignment:
    def test_rounds_up(self):
        assert align_budget(9670, 128) == 9728

    def test_exact_multiple_unchanged(self):
        assert align_budget(9728, 128) == 9728

    def test_minimum_one_unit(self):
        assert align_budget(1, 8) == 8

    @given(st.integers(1, 10_000), st.integers(1, 256))
    @settings(max_examples=100, deadline=None)
    def test_alignment_properties(self, raw, unit):
        aligned = align_budget(raw, unit)
        assert aligned % unit == 0
        assert aligned >= raw
        assert aligned - raw < unit


class TestSelectFfn:
    def test_aligned_target_then_select(self):
        rng = seeded_rng(8)
        w_up = rng.normal(size=(16, 256))  # model orientation: (d, ffn)
        w_down = rng.normal(size=(256, 16))
        sel = F.select_ffn(w_up.T, w_down.T, block=0, prune_ratio=0.3, tau=0.95, unit=8)
        assert sel.target_budget == 184  # 256*0.7 = 179.2 aligned up to 8
        assert sel.achieved_budget == 184
        assert sel.retained == sorted(sel.retained)
