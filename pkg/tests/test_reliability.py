import math

import numpy as np
import pytest

from activeseg.errors import BudgetError, DomainError, EmptyInputError, PairingError
from activeseg.kernels import cosine_distance_raw
from activeseg.reliability import (
    ReliabilityResult,
    SelectionConfig,
    candidate_count,
    confidence,
    mean_confidence,
    predicted_foreground_mask,
    reliability_score,
    select_reliable,
    semantic_distance,
)
from activeseg.types import EmbeddingVec, ProbVolume, ScoreVector


def vol(probs, sid="a"):
    return ProbVolume(np.asarray(probs, dtype=float), sid)


def single_voxel(*probs):
    return vol(np.asarray(probs).reshape(len(probs), 1, 1, 1))


def emb(vals, sid, rnd=1):
    return EmbeddingVec(np.asarray(vals, dtype=float), sid, rnd)


def brute_confidence(probs, variant="mean"):
    """Two-pass voxel loop oracle: mask pass then masked-margin aggregation."""
    c, h, w, d = probs.shape
    total = 0.0
    count = 0
    for x in range(h):
        for y in range(w):
            for z in range(d):
                col = [probs[i, x, y, z] for i in range(c)]
                best = max(range(c), key=lambda i: (col[i], -i))
                if best == 0:
                    continue
                ordered = sorted(col, reverse=True)
                total += ordered[0] - ordered[1]
                count += 1
    if variant == "sum":
        return total
    return total / count if count else 0.0


class TestPredictedForegroundMask:
    def test_foreground_argmax(self):
        assert predicted_foreground_mask(single_voxel(0.2, 0.7, 0.1)).mask[0, 0, 0] == 1.0

    def test_background_argmax(self):
        assert predicted_foreground_mask(single_voxel(0.7, 0.2, 0.1)).mask[0, 0, 0] == 0.0

    def test_tie_goes_to_background(self):
        assert predicted_foreground_mask(single_voxel(0.5, 0.5)).mask[0, 0, 0] == 0.0

    def test_single_class_rejected(self):
        with pytest.raises(DomainError):
            predicted_foreground_mask(vol(np.ones((1, 2, 2, 2))))


class TestConfidence:
    def test_one_voxel_margin(self):
        assert confidence(single_voxel(0.2, 0.7, 0.1)) == pytest.approx(0.5, abs=1e-12)

    def test_all_background_scores_zero(self):
        probs = np.zeros((3, 2, 2, 2))
        probs[0] = 0.8
        probs[1] = 0.1
        probs[2] = 0.1
        assert confidence(vol(probs)) == 0.0

    @pytest.mark.parametrize("variant", ["mean", "sum"])
    def test_matches_brute_force(self, variant):
        rng = np.random.default_rng(43)
        raw = rng.dirichlet(np.ones(4), size=(6, 6, 6))
        probs = np.moveaxis(raw, -1, 0)
        got = confidence(vol(probs), variant)
        assert got == pytest.approx(brute_confidence(probs, variant), abs=1e-9)

    def test_mean_variant_bounded(self):
        rng = np.random.default_rng(47)
        for _ in range(20):
            raw = rng.dirichlet(np.ones(3), size=(4, 4, 4))
            c = confidence(vol(np.moveaxis(raw, -1, 0)))
            assert 0.0 <= c <= 1.0

    def test_unknown_variant(self):
        with pytest.raises(DomainError):
            confidence(single_voxel(0.5, 0.5), "median")


class TestMeanConfidence:
    def test_mean(self):
        assert mean_confidence([0.4, 0.6]) == pytest.approx(0.5, abs=1e-12)

    def test_singleton(self):
        assert mean_confidence([0.37]) == pytest.approx(0.37, abs=1e-12)

    def test_matches_summation(self):
        rng = np.random.default_rng(53)
        vals = [float(v) for v in rng.random(100)]
        assert mean_confidence(vals) == pytest.approx(sum(vals) / 100, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            mean_confidence([])


class TestCandidateCount:
    def test_raw_formula(self):
        cfg = SelectionConfig(n_su=5, n_unlabeled=100, tau_c=2.0)
        assert candidate_count(cfg, 0.5) == 20

    def test_lower_clamp(self):
        cfg = SelectionConfig(n_su=5, n_unlabeled=100, tau_c=0.5)
        assert candidate_count(cfg, 0.9) == 5  # raw 2.78

    def test_upper_clamp(self):
        cfg = SelectionConfig(n_su=5, n_unlabeled=30, tau_c=2.0)
        assert candidate_count(cfg, 0.01) == 30  # raw 1000

    def test_zero_confidence_opens_pool(self):
        cfg = SelectionConfig(n_su=5, n_unlabeled=44, tau_c=2.0)
        assert candidate_count(cfg, 0.0) == 44

    def test_budget_error(self):
        with pytest.raises(BudgetError):
            SelectionConfig(n_su=10, n_unlabeled=5)

    def test_negative_confidence_rejected(self):
        cfg = SelectionConfig(n_su=2, n_unlabeled=10)
        with pytest.raises(DomainError):
            candidate_count(cfg, -0.1)


class TestSemanticDistance:
    def test_identity_anchor(self):
        anchors = [emb([1, 0], "l1"), emb([3, 4], "l2")]
        assert semantic_distance(emb([3, 4], "u"), anchors) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_geometry(self):
        anchors = [emb([1, 0], "l1"), emb([0, 1], "l2")]
        cand = emb([1 / math.sqrt(2), 1 / math.sqrt(2)], "u")
        assert semantic_distance(cand, anchors) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-9)
        assert semantic_distance(cand, anchors) == pytest.approx(0.2929, abs=1e-4)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(59)
        anchors = [emb(rng.normal(size=16), f"l{i:02d}") for i in range(20)]
        for j in range(50):
            cand = emb(rng.normal(size=16), f"u{j:02d}")
            want = min(
                cosine_distance_raw(a.values, cand.values) for a in anchors
            )
            assert semantic_distance(cand, anchors) == pytest.approx(want, abs=1e-9)

    def test_empty_anchors(self):
        with pytest.raises(DomainError):
            semantic_distance(emb([1, 0], "u"), [])


def brute_select(conf_map, emb_map, anchor_list, n_su, tau_c):
    """Straight-line re-implementation of the whole selection pipeline."""
    ids = sorted(conf_map)
    c_bar = sum(conf_map.values()) / len(conf_map)
    if c_bar > 0:
        k = int(math.floor(n_su * tau_c / c_bar + 0.5))
    else:
        k = len(ids)
    k = max(n_su, min(len(ids), k))
    cands = sorted(ids, key=lambda s: (-conf_map[s], s))[:k]
    rel = {}
    for s in cands:
        d = min(cosine_distance_raw(a.values, emb_map[s].values) for a in anchor_list)
        rel[s] = conf_map[s] * max(0.0, 1.0 - d)
    chosen = sorted(cands, key=lambda s: (-rel[s], s))[:n_su]
    return chosen


class TestSelectReliable:
    def small_inputs(self):
        conf = ScoreVector.from_mapping({"u1": 0.8, "u2": 0.9})
        embs = {"u1": emb([1, 0], "u1"), "u2": emb([0, 1], "u2")}
        # u1 sits close to the anchor, u2 nearly orthogonal
        anchors = [emb([0.97, 0.24], "l1")]
        return conf, embs, anchors

    def test_reliability_arithmetic(self):
        # C=0.8,D=0.25 beats C=0.9,D=0.9: 0.6 vs 0.09
        assert reliability_score(0.8, 0.25) == pytest.approx(0.6, abs=1e-12)
        assert reliability_score(0.9, 0.9) == pytest.approx(0.09, abs=1e-12)

    def test_prefers_low_distance(self):
        conf, embs, anchors = self.small_inputs()
        cfg = SelectionConfig(n_su=1, n_unlabeled=2)
        result = select_reliable(conf, embs, cfg, anchors)
        assert list(result.selected) == ["u1"]
        assert result.exclusion_update == frozenset({"u1"})

    def test_distance_above_one_clamps_to_zero(self):
        assert reliability_score(0.9, 1.3) == 0.0

    def test_pipeline_matches_straight_line_oracle(self):
        rng = np.random.default_rng(61)
        n = 40
        ids = [f"u{i:02d}" for i in range(n)]
        conf_map = {sid: float(rng.random()) for sid in ids}
        emb_map = {sid: emb(rng.normal(size=8), sid) for sid in ids}
        anchors = [emb(rng.normal(size=8), f"l{i}") for i in range(5)]
        cfg = SelectionConfig(n_su=6, n_unlabeled=n, tau_c=2.0)
        result = select_reliable(ScoreVector.from_mapping(conf_map), emb_map, cfg, anchors)
        want = brute_select(conf_map, emb_map, anchors, 6, 2.0)
        assert list(result.selected) == want

    def test_permutation_invariance(self):
        rng = np.random.default_rng(67)
        ids = [f"u{i:02d}" for i in range(15)]
        conf_pairs = [(sid, float(rng.random())) for sid in ids]
        emb_map = {sid: emb(rng.normal(size=4), sid) for sid in ids}
        anchors = [emb(rng.normal(size=4), "l0")]
        cfg = SelectionConfig(n_su=4, n_unlabeled=15)
        a = select_reliable(ScoreVector.from_pairs(conf_pairs), emb_map, cfg, anchors)
        b = select_reliable(
            ScoreVector.from_pairs(list(reversed(conf_pairs))), emb_map, cfg, anchors
        )
        assert a.selected == b.selected

    def test_selected_subset_invariants(self):
        rng = np.random.default_rng(71)
        ids = [f"u{i:02d}" for i in range(25)]
        conf = ScoreVector.from_pairs((sid, float(rng.random())) for sid in ids)
        emb_map = {sid: emb(rng.normal(size=4), sid) for sid in ids}
        anchors = [emb(rng.normal(size=4), "l0"), emb(rng.normal(size=4), "l1")]
        cfg = SelectionConfig(n_su=5, n_unlabeled=25)
        result = select_reliable(conf, emb_map, cfg, anchors)
        by_id = result.by_id
        cand_ids = {r.sample_id for r in result.rows if r.candidate}
        assert set(result.selected) <= cand_ids <= set(ids)
        assert len(result.selected) == 5
        for r in result.rows:
            assert 0.0 <= r.confidence <= 1.0
            if r.candidate:
                assert r.reliability <= r.confidence + 1e-12
                assert r.reliability == pytest.approx(
                    r.confidence * max(0.0, 1.0 - r.semantic_distance), abs=1e-12
                )
        for sid in result.selected:
            assert by_id[sid].selected

    def test_increasing_distance_only_removes(self):
        rng = np.random.default_rng(73)
        ids = [f"u{i:02d}" for i in range(12)]
        conf = ScoreVector.from_pairs((sid, 0.5 + 0.4 * float(rng.random())) for sid in ids)
        emb_map = {sid: emb(np.abs(rng.normal(size=4)) + 0.1, sid) for sid in ids}
        anchors = [emb(np.abs(rng.normal(size=4)) + 0.1, "l0")]
        cfg = SelectionConfig(n_su=4, n_unlabeled=12)
        base = select_reliable(conf, emb_map, cfg, anchors)
        far = emb([1.0, -1.0, 1.0, -1.0], "tmp")

        # pushing a selected sample away keeps every *other* selected sample in
        victim = base.selected[0]
        moved = dict(emb_map)
        moved[victim] = emb(far.values, victim)
        after = select_reliable(conf, moved, cfg, anchors)
        assert set(base.selected) - {victim} <= set(after.selected)

        # pushing a non-selected sample away can never select it
        outsider = next(sid for sid in ids if sid not in base.selected)
        moved = dict(emb_map)
        moved[outsider] = emb(far.values, outsider)
        after = select_reliable(conf, moved, cfg, anchors)
        assert outsider not in after.selected

    def test_budget_error(self):
        conf = ScoreVector.from_mapping({"u1": 0.5})
        with pytest.raises(BudgetError):
            SelectionConfig(n_su=2, n_unlabeled=1)
        cfg = SelectionConfig(n_su=1, n_unlabeled=1)
        with pytest.raises(PairingError):
            select_reliable(conf, {}, cfg, [emb([1, 0], "l0")])

    def test_csv_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(79)
        ids = [f"u{i:02d}" for i in range(10)]
        conf = ScoreVector.from_pairs((sid, float(rng.random())) for sid in ids)
        emb_map = {sid: emb(rng.normal(size=4), sid) for sid in ids}
        anchors = [emb(rng.normal(size=4), "l0")]
        cfg = SelectionConfig(n_su=3, n_unlabeled=10, tau_c=0.8)
        result = select_reliable(conf, emb_map, cfg, anchors, round_index=2)
        p1 = tmp_path / "rel1.csv"
        p2 = tmp_path / "rel2.csv"
        result.write_csv(p1)
        ReliabilityResult.read_csv(p1).write_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()
        back = ReliabilityResult.read_csv(p1)
        assert back.selected == result.selected
        assert back.round == 2
