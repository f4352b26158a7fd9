import math

import numpy as np
import pytest

from activeseg.errors import (
    DomainError,
    ExhaustionError,
    FormatError,
    PairingError,
)
from activeseg.kernels import cosine_distance_raw
from activeseg.query import (
    QueryRow,
    QueryScores,
    TemperatureSchedule,
    asd,
    asd_at_temperature,
    dkd,
    foreground_mask,
    pakd,
    pd_scores,
    query_criterion,
    select_batch,
    temperature,
)
from activeseg.types import EmbeddingVec, ProbVolume, ScoreVector


def emb(vals, sid, rnd=1):
    return EmbeddingVec(np.asarray(vals, dtype=float), sid, rnd)


def random_prob_volume(rng, classes, side, sid="a"):
    raw = rng.dirichlet(np.ones(classes), size=(side, side, side))
    return ProbVolume(np.moveaxis(raw, -1, 0), sid)


# ---------------------------------------------------------------- oracles


def brute_pd(embeddings, pakd_map):
    """Independent O(n^2) recomputation of pairwise dissimilarity."""
    order = sorted(pakd_map, key=lambda sid: (-pakd_map[sid], sid))
    vecs = {e.sample_id: np.asarray(e.values, dtype=float) for e in embeddings}
    out = {}
    for c, sid in enumerate(order, start=1):
        if c == 1:
            out[sid] = 1.0
            continue
        num = den = 0.0
        for k in range(1, c):
            other = order[c - 1 - k]
            num += k * cosine_distance_raw(vecs[sid], vecs[other])
            den += k
        out[sid] = num / den
    return out


def brute_asd(probs, tau):
    """Voxel-loop oracle composing the mask rule with the entropy sum."""
    c, h, w, d = probs.shape
    total = 0.0
    for x in range(h):
        for y in range(w):
            for z in range(d):
                fg = max(probs[i, x, y, z] for i in range(1, c))
                if probs[0, x, y, z] / tau < fg:
                    for i in range(c):
                        p = probs[i, x, y, z]
                        if p > 0:
                            total -= p * math.log(p)
    return total


def brute_dkd_pipeline(e0s, eis):
    """Single-function reference for the pakd -> pd -> dkd chain."""
    pakd_map = {
        e0.sample_id: cosine_distance_raw(e0.values, ei.values)
        for e0, ei in zip(e0s, eis)
    }
    pd_map = brute_pd(eis, pakd_map)
    return {sid: pakd_map[sid] * pd_map[sid] for sid in pakd_map}


# ---------------------------------------------------------------- temperature


class TestTemperature:
    def test_first_round_is_three(self):
        for r_max in (2, 3, 5, 6, 10):
            assert temperature(1, r_max) == pytest.approx(3.0, abs=1e-12)

    def test_last_round_is_one_point_five(self):
        for r_max in (2, 3, 5, 6, 10):
            assert temperature(r_max, r_max) == pytest.approx(1.5, abs=1e-12)

    def test_sqrt_round(self):
        assert temperature(2, 4) == pytest.approx(2.25, abs=1e-12)

    def test_single_round_degenerate(self):
        assert temperature(1, 1) == 3.0

    def test_strictly_decreasing(self):
        for r_max in (2, 5, 9):
            vals = [temperature(r, r_max) for r in range(1, r_max + 1)]
            assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            temperature(0, 5)
        with pytest.raises(DomainError):
            temperature(6, 5)

    def test_schedule_wrapper(self):
        sched = TemperatureSchedule(5)
        assert sched(1) == 3.0
        assert sched(5) == 1.5
        with pytest.raises(DomainError):
            TemperatureSchedule(0)


# ---------------------------------------------------------------- pakd


class TestPakd:
    def test_identity(self):
        e0 = EmbeddingVec(np.array([1.0, 2.0]), "x", 0)
        ei = EmbeddingVec(np.array([1.0, 2.0]), "x", 3)
        assert pakd(e0, ei) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        e0 = EmbeddingVec(np.array([1.0, 0.0, 0.0]), "x", 0)
        ei = EmbeddingVec(np.array([0.0, 1.0, 0.0]), "x", 1)
        assert pakd(e0, ei) == pytest.approx(1.0, abs=1e-12)

    def test_matches_cosine_distance(self):
        rng = np.random.default_rng(3)
        for i in range(16):
            a = rng.normal(size=32)
            b = rng.normal(size=32)
            e0 = EmbeddingVec(a, f"s{i}", 0)
            ei = EmbeddingVec(b, f"s{i}", 2)
            assert pakd(e0, ei) == pytest.approx(cosine_distance_raw(a, b), abs=1e-12)

    def test_sample_mismatch(self):
        with pytest.raises(PairingError):
            pakd(EmbeddingVec(np.ones(2), "x", 0), EmbeddingVec(np.ones(2), "y", 1))

    def test_wrong_reference_round(self):
        with pytest.raises(PairingError):
            pakd(EmbeddingVec(np.ones(2), "x", 1), EmbeddingVec(np.ones(2), "x", 2))


# ---------------------------------------------------------------- pd / dkd


class TestPdScores:
    def test_single_sample(self):
        e = [emb([1, 0], "a")]
        out = pd_scores(e, ScoreVector.from_mapping({"a": 0.7}))
        assert out.as_dict() == {"a": 1.0}

    def test_two_samples(self):
        es = [emb([1, 0], "a"), emb([0, 1], "b")]
        scores = ScoreVector.from_mapping({"a": 0.9, "b": 0.4})
        out = pd_scores(es, scores).as_dict()
        assert out["a"] == 1.0
        assert out["b"] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n", [2, 5, 17, 64])
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(n)
        es = [emb(rng.normal(size=8), f"s{i:03d}") for i in range(n)]
        pakd_map = {e.sample_id: float(rng.random()) for e in es}
        got = pd_scores(es, ScoreVector.from_mapping(pakd_map)).as_dict()
        want = brute_pd(es, pakd_map)
        for sid in pakd_map:
            assert got[sid] == pytest.approx(want[sid], abs=1e-9)

    def test_tied_pakd_rank_by_id(self):
        es = [emb([1, 0], "b"), emb([0, 1], "a"), emb([1, 1], "c")]
        scores = ScoreVector.from_mapping({"a": 0.5, "b": 0.5, "c": 0.1})
        out = pd_scores(es, scores).as_dict()
        # ties broken ascending: order a, b, c
        assert out["a"] == 1.0
        assert out["b"] == pytest.approx(1.0, abs=1e-12)

    def test_missing_embedding(self):
        with pytest.raises(PairingError):
            pd_scores([emb([1, 0], "a")], ScoreVector.from_mapping({"a": 1.0, "b": 0.5}))


class TestDkd:
    def test_zero_annihilates(self):
        out = dkd(
            ScoreVector.from_mapping({"a": 0.0, "b": 0.5}),
            ScoreVector.from_mapping({"a": 0.9, "b": 1.0}),
        )
        assert out.as_dict()["a"] == 0.0

    def test_rank_one_rule(self):
        out = dkd(ScoreVector.from_mapping({"a": 0.4}), ScoreVector.from_mapping({"a": 1.0}))
        assert out.as_dict() == {"a": 0.4}

    def test_elementwise_product(self):
        rng = np.random.default_rng(5)
        ids = [f"s{i}" for i in range(20)]
        p = {sid: float(rng.random()) for sid in ids}
        q = {sid: float(rng.random()) for sid in ids}
        out = dkd(ScoreVector.from_mapping(p), ScoreVector.from_mapping(q)).as_dict()
        for sid in ids:
            assert out[sid] == pytest.approx(p[sid] * q[sid], abs=1e-12)

    def test_key_mismatch(self):
        with pytest.raises(PairingError):
            dkd(ScoreVector.from_mapping({"a": 1.0}), ScoreVector.from_mapping({"b": 1.0}))

    def test_pipeline_matches_single_function_reference(self):
        rng = np.random.default_rng(11)
        n = 48
        e0s = [EmbeddingVec(rng.normal(size=6), f"s{i:03d}", 0) for i in range(n)]
        eis = [EmbeddingVec(rng.normal(size=6), f"s{i:03d}", 1) for i in range(n)]
        pakd_vec = ScoreVector.from_pairs(
            (e0.sample_id, pakd(e0, ei)) for e0, ei in zip(e0s, eis)
        )
        got = dkd(pakd_vec, pd_scores(eis, pakd_vec)).as_dict()
        want = brute_dkd_pipeline(e0s, eis)
        for sid, v in want.items():
            assert got[sid] == pytest.approx(v, abs=1e-9)

    def test_scale_invariance_of_pipeline(self):
        rng = np.random.default_rng(13)
        n = 12
        base0 = [rng.normal(size=5) for _ in range(n)]
        base1 = [rng.normal(size=5) for _ in range(n)]

        def pipeline(scale):
            e0s = [EmbeddingVec(scale * v, f"s{i}", 0) for i, v in enumerate(base0)]
            eis = [EmbeddingVec(scale * v, f"s{i}", 1) for i, v in enumerate(base1)]
            pv = ScoreVector.from_pairs(
                (e0.sample_id, pakd(e0, ei)) for e0, ei in zip(e0s, eis)
            )
            return dkd(pv, pd_scores(eis, pv)).as_dict()

        one = pipeline(1.0)
        scaled = pipeline(37.5)
        for sid in one:
            assert scaled[sid] == pytest.approx(one[sid], abs=1e-9)


# ---------------------------------------------------------------- masks / asd


class TestForegroundMask:
    def test_tolerant_voxel_becomes_foreground(self):
        vol = ProbVolume(np.array([0.6, 0.4]).reshape(2, 1, 1, 1), "a")
        assert foreground_mask(vol, 3.0).mask[0, 0, 0] == 1.0

    def test_confident_background_stays_background(self):
        vol = ProbVolume(np.array([0.9, 0.1]).reshape(2, 1, 1, 1), "a")
        assert foreground_mask(vol, 1.5).mask[0, 0, 0] == 0.0

    def test_strict_inequality_on_equality(self):
        vol = ProbVolume(np.array([0.5, 0.5]).reshape(2, 1, 1, 1), "a")
        assert foreground_mask(vol, 1.0).mask[0, 0, 0] == 0.0

    def test_matches_voxel_loop(self):
        rng = np.random.default_rng(17)
        vol = random_prob_volume(rng, 4, 6)
        tau = 2.2
        mask = foreground_mask(vol, tau).mask
        p = vol.probs
        for x in range(6):
            for y in range(6):
                for z in range(6):
                    fg = max(p[i, x, y, z] for i in range(1, 4))
                    want = 1.0 if p[0, x, y, z] / tau < fg else 0.0
                    assert mask[x, y, z] == want

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(19)
        vol = random_prob_volume(rng, 3, 5)
        small = foreground_mask(vol, 1.5).mask
        large = foreground_mask(vol, 3.0).mask
        assert np.all(large >= small)

    def test_single_class_rejected(self):
        vol = ProbVolume(np.ones((1, 2, 2, 2)), "a")
        with pytest.raises(DomainError):
            foreground_mask(vol, 2.0)

    def test_tau_below_one_rejected(self):
        vol = ProbVolume(np.full((2, 1, 1, 1), 0.5), "a")
        with pytest.raises(DomainError):
            foreground_mask(vol, 0.5)


class TestAsd:
    def test_pure_background_scores_zero(self):
        probs = np.zeros((3, 2, 2, 2))
        probs[0] = 1.0
        assert asd(ProbVolume(probs, "a"), 1, 5) == 0.0

    def test_single_voxel_value(self):
        vol = ProbVolume(np.array([0.2, 0.4, 0.4]).reshape(3, 1, 1, 1), "a")
        want = -(0.2 * math.log(0.2) + 2 * 0.4 * math.log(0.4))
        assert asd_at_temperature(vol, 3.0) == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(1.0549, abs=1e-4)

    @pytest.mark.parametrize("round_index", [1, 2, 3, 4, 5])
    def test_matches_brute_force(self, round_index):
        rng = np.random.default_rng(round_index * 7)
        vol = random_prob_volume(rng, 3, 8)
        tau = temperature(round_index, 5)
        assert asd(vol, round_index, 5) == pytest.approx(brute_asd(vol.probs, tau), abs=1e-9)

    def test_relaxing_tau_never_shrinks_score_for_uniform_rows(self):
        # all per-voxel distributions equal: entropy scales with mask size
        probs = np.tile(np.array([0.5, 0.3, 0.2]).reshape(3, 1, 1, 1), (1, 4, 4, 4))
        vol = ProbVolume(probs, "a")
        assert asd_at_temperature(vol, 3.0) >= asd_at_temperature(vol, 1.5)


# ---------------------------------------------------------------- criterion


class TestQueryCriterion:
    def test_single_sample_q_is_one(self):
        out = query_criterion(
            ScoreVector.from_mapping({"a": 0.3}),
            ScoreVector.from_mapping({"a": 5.0}),
        )
        assert out["a"].q == pytest.approx(1.0, abs=1e-12)

    def test_double_top_gets_two(self):
        out = query_criterion(
            ScoreVector.from_mapping({"a": 0.9, "b": 0.1, "c": 0.5}),
            ScoreVector.from_mapping({"a": 7.0, "b": 2.0, "c": 3.0}),
        )
        assert out["a"].q == pytest.approx(2.0, abs=1e-12)

    def test_recomposition(self):
        from activeseg.kernels import minmax_normalize, quantile_transform

        rng = np.random.default_rng(23)
        ids = [f"s{i:02d}" for i in range(50)]
        d = ScoreVector.from_pairs((sid, float(rng.normal())) for sid in ids)
        a = ScoreVector.from_pairs((sid, float(rng.gamma(2.0))) for sid in ids)
        out = query_criterion(d, a)
        dq = quantile_transform(minmax_normalize(d)).as_dict()
        aq = quantile_transform(minmax_normalize(a)).as_dict()
        for sid in ids:
            assert out[sid].q == pytest.approx(dq[sid] + aq[sid], abs=1e-12)

    def test_monotone_transform_leaves_q_unchanged(self):
        rng = np.random.default_rng(29)
        ids = [f"s{i:02d}" for i in range(30)]
        d_raw = {sid: float(rng.normal()) for sid in ids}
        a_raw = {sid: float(rng.random()) for sid in ids}
        base = query_criterion(
            ScoreVector.from_mapping(d_raw), ScoreVector.from_mapping(a_raw)
        )
        warped = query_criterion(
            ScoreVector.from_mapping({k: math.exp(v) for k, v in d_raw.items()}),
            ScoreVector.from_mapping({k: v**3 for k, v in a_raw.items()}),
        )
        for sid in ids:
            assert warped[sid].q == pytest.approx(base[sid].q, abs=1e-12)

    def test_bounds(self):
        rng = np.random.default_rng(31)
        ids = [f"s{i:03d}" for i in range(500)]
        d = ScoreVector.from_pairs((sid, float(rng.normal())) for sid in ids)
        a = ScoreVector.from_pairs((sid, float(rng.exponential())) for sid in ids)
        out = query_criterion(d, a)
        for row in out.rows:
            assert 0.0 <= row.q <= 2.0

    def test_key_mismatch(self):
        with pytest.raises(PairingError):
            query_criterion(
                ScoreVector.from_mapping({"a": 1.0}),
                ScoreVector.from_mapping({"b": 1.0}),
            )


class TestSelectBatch:
    def scores(self, mapping):
        return ScoreVector.from_mapping(mapping)

    def test_ordering(self):
        got = select_batch(self.scores({"a": 1.9, "b": 1.2, "c": 0.3}), 2)
        assert got == ["a", "b"]

    def test_exclusion(self):
        got = select_batch(self.scores({"a": 1.9, "b": 1.2, "c": 0.3}), 2, {"a"})
        assert got == ["b", "c"]

    def test_tie_break(self):
        got = select_batch(self.scores({"b": 1.0, "a": 1.0}), 1)
        assert got == ["a"]

    def test_exhaustion(self):
        with pytest.raises(ExhaustionError):
            select_batch(self.scores({"a": 1.0}), 1, {"a"})

    def test_shortfall_returns_all(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING, logger="activeseg.query"):
            got = select_batch(self.scores({"a": 1.0, "b": 0.5}), 5)
        assert got == ["a", "b"]
        assert any("shortfall" in rec.message for rec in caplog.records)

    def test_matches_sort_and_slice_oracle(self):
        rng = np.random.default_rng(37)
        ids = [f"s{i:03d}" for i in range(200)]
        vals = {sid: float(rng.integers(0, 8)) for sid in ids}  # force tie groups
        excluded = set(rng.choice(ids, size=31, replace=False))
        for n_b in (1, 7, 50):
            want = [
                sid
                for sid, _ in sorted(
                    ((s, v) for s, v in vals.items() if s not in excluded),
                    key=lambda t: (-t[1], t[0]),
                )
            ][:n_b]
            assert select_batch(self.scores(vals), n_b, excluded) == want

    def test_works_on_query_scores_table(self):
        rows = [
            QueryRow("a", 0.1, 1.0, 0.1, 2.0, 1.0, 0.5, 1.5, 1),
            QueryRow("b", 0.2, 1.0, 0.2, 1.0, 0.5, 1.0, 1.5, 1),
            QueryRow("c", 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1),
        ]
        assert select_batch(QueryScores(rows), 2) == ["a", "b"]


# ---------------------------------------------------------------- score table


class TestScoreTable:
    def make_table(self):
        rng = np.random.default_rng(41)
        ids = [f"s{i:02d}" for i in range(9)]
        d = ScoreVector.from_pairs((sid, float(rng.normal())) for sid in ids)
        a = ScoreVector.from_pairs((sid, float(rng.random() * 40)) for sid in ids)
        return query_criterion(d, a, round_index=2)

    def test_csv_round_trip_bitwise(self, tmp_path):
        table = self.make_table()
        p1 = tmp_path / "scores1.csv"
        p2 = tmp_path / "scores2.csv"
        table.write_csv(p1)
        QueryScores.read_csv(p1).write_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rows_sorted_by_q_then_id(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "scores.csv"
        table.write_csv(path)
        lines = path.read_text().strip().splitlines()[1:]
        qs = [float(line.split(",")[7]) for line in lines]
        assert qs == sorted(qs, reverse=True)

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("sample,q\nx,1\n")
        with pytest.raises(FormatError):
            QueryScores.read_csv(path)

    def test_q_invariant_enforced(self):
        with pytest.raises(DomainError):
            QueryRow("a", 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.7, 1)
