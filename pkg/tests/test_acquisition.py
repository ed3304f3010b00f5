import itertools
import math

import numpy as np
import pytest

from activeloop.acquisition import (STRATEGIES, AcquisitionOptions, badge_select, balance_greedy,
                                    confidence_score, conciseness_score, coreset_select,
                                    covering_radius, crb_select, density_signature, entropy,
                                    entropy_score, k_center_greedy, kl_to_uniform,
                                    mc_variance_score, random_select, select, tcrb_select)
from conftest import make_det, make_record

UNIFORM4 = [0.25, 0.25, 0.25, 0.25]
ONEHOT4 = [1.0, 0.0, 0.0, 0.0]


def entropy_det(h_target):
    """Two-entry distribution whose entropy is ``h_target`` (bisection)."""
    lo, hi = 0.0, 0.5
    for _ in range(200):
        mid = (lo + hi) / 2
        if entropy([mid, 1 - mid]) < h_target:
            lo = mid
        else:
            hi = mid
    return make_det([lo, 1 - lo])


def test_entropy_examples():
    assert entropy_score(make_record(0, [make_det(UNIFORM4)])) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy_score(make_record(0, [make_det(ONEHOT4)])) == 0.0
    rec = make_record(0, [entropy_det(0.2), entropy_det(0.6)])
    assert entropy_score(rec) == pytest.approx(0.4, abs=1e-9)
    assert entropy_score(make_record(0, [])) == 0.0
    assert entropy_score(rec, aggregate="sum") == pytest.approx(0.8, abs=1e-9)


def test_entropy_foreground_only():
    rec = make_record(0, [make_det([0.25, 0.25, 0.5])])
    assert entropy_score(rec, foreground_only=True) == pytest.approx(math.log(2))


def test_confidence_examples():
    assert confidence_score(make_record(0, [make_det([0.5, 0.5, 0.0])])) == 0.0
    assert confidence_score(make_record(0, [make_det([0.25, 0.0, 0.75])])) == pytest.approx(0.75)
    rec = make_record(0, [make_det([0.9, 0.0, 0.1]), make_det([0.5, 0.0, 0.5])])
    assert confidence_score(rec) == pytest.approx(0.3)


def test_mc_variance_examples():
    same = np.tile([0.3, 0.7], (5, 1))
    assert mc_variance_score(make_record(0, [make_det([0.3, 0.7])], pass_probs=[same])) == 0.0
    two = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert mc_variance_score(make_record(0, [make_det([0.5, 0.5])], pass_probs=[two])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mc_variance_score(make_record(0, [make_det([0.5, 0.5])]))


def test_coreset_examples():
    one = [make_record(7, emb=[1.0])]
    assert coreset_select(one, [], 1).selected == [7]
    recs = [make_record(i, emb=[v]) for i, v in enumerate([1.0, 2.0, 10.0])]
    assert coreset_select(recs, [[0.0]], 1).selected == [2]


def optimal_k_center(points, k):
    best = math.inf
    for centers in itertools.combinations(range(len(points)), k):
        best = min(best, covering_radius(points, points[list(centers)]))
    return best


def test_coreset_two_center_bound(rng):
    for _ in range(30):
        pts = rng.uniform(size=(6, 2))
        recs = [make_record(i, emb=p) for i, p in enumerate(pts)]
        sel = coreset_select(recs, [], 2).selected
        assert covering_radius(pts, pts[sel]) <= 2 * optimal_k_center(pts, 2) + 1e-12


def test_k_center_tie_break():
    pts = np.array([[0.0], [1.0], [-1.0]])
    picks, _ = k_center_greedy(pts, [5, 3, 9], 1)
    # points 1.0 and -1.0 tie on distance to the centroid; id 3 wins
    assert picks == [1]


def test_badge_examples():
    recs = [make_record(i, gemb=np.zeros(3)) for i in range(5)]
    recs[3] = make_record(3, gemb=np.array([0.0, 2.0, 0.0]))
    for seed in range(10):
        assert badge_select(recs, 1, seed).selected == [3]
    assert sorted(badge_select(recs, 5, 0).selected) == [0, 1, 2, 3, 4]
    tri = [make_record(i, gemb=np.eye(3)[i]) for i in range(3)]
    for seed in range(10):
        assert sorted(badge_select(tri, 3, seed).selected) == [0, 1, 2]
    assert badge_select(tri, 2, 4).selected == badge_select(tri, 2, 4).selected


def test_random_examples():
    assert sorted(random_select([4, 2, 9], 3, 0).selected) == [2, 4, 9]
    with pytest.raises(ValueError):
        random_select([1, 2], 0)
    assert random_select(range(50), 5, 3).selected == random_select(range(50), 5, 3).selected


def test_conciseness_prefers_rare_class():
    hist = np.array([50.0, 1.0, 1.0])
    rare = [make_det([0.0, 0.9, 0.0, 0.1])]
    common = [make_det([0.9, 0.0, 0.0, 0.1])]
    assert conciseness_score(rare, hist, 3) > conciseness_score(common, hist, 3)


def test_balance_hand_kl():
    sigs = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]), 2: np.array([0.5, 0.5])}
    # (2,1)/3 vs uniform: 2/3 ln(4/3) + 1/3 ln(2/3)
    skew = 2 / 3 * math.log(4 / 3) + 1 / 3 * math.log(2 / 3)
    assert kl_to_uniform(sigs[0]) == pytest.approx(skew, abs=1e-12)
    assert kl_to_uniform(sigs[2]) == pytest.approx(0.0, abs=1e-15)
    picked, _ = balance_greedy(sigs, 1)
    assert picked == [2]


def test_density_signature():
    near = make_det([0.9, 0.1], center=(5.0, 0.0, 0.8), point_count=1000)
    far = make_det([0.9, 0.1], center=(20.0, 0.0, 0.8), point_count=250)
    sig = density_signature([near, far], bins=3, range_max=30.0, density_n0=1000.0, d0=10.0)
    assert sig.tolist() == pytest.approx([1.0, 0.0, 1.0])


def crb_pool(rng, n=30, C=3, seqs=3):
    recs = []
    per_seq = n // seqs
    for i in range(n):
        dets = []
        for _ in range(int(rng.integers(1, 5))):
            p = rng.dirichlet(np.ones(C + 1))
            d = rng.uniform(1, 30)
            dets.append(make_det(p, center=(d, 0.0, 0.8), point_count=int(rng.integers(5, 500)),
                                 grad=rng.normal(size=(C + 1) * 9)))
        recs.append(make_record(i, dets, seq=i // per_seq, idx=i % per_seq))
    return recs


def test_crb_stages_nested(rng):
    recs = crb_pool(rng)
    res = crb_select(recs, np.array([10.0, 2.0, 1.0]), 3)
    c, r, b = res.stages["C"], res.stages["R"], res.stages["B"]
    assert (len(recs), len(c), len(r), len(b)) == (30, 12, 6, 3)
    assert set(r) <= set(c) and set(b) <= set(r)
    assert res.selected == b


def test_crb_pass_through(rng):
    recs = crb_pool(rng, n=4)
    res = crb_select(recs, np.zeros(3), 4, k1_factor=1, k2_factor=1)
    assert sorted(res.selected) == [0, 1, 2, 3]


def test_tcrb_window_one_equals_crb(rng):
    recs = crb_pool(rng)
    hist = np.array([5.0, 1.0, 0.0])
    for b in (1, 4, 7):
        assert tcrb_select(recs, hist, b, window=1).selected == crb_select(recs, hist, b).selected


def test_tcrb_single_sequence():
    recs = [make_record(i, [make_det([0.5, 0.3, 0.2])], seq=4, idx=i) for i in range(10)]
    assert tcrb_select(recs, np.zeros(2), 10, window=10).selected == list(range(10))


def test_tcrb_prefers_mixed_window():
    a = [make_record(i, [make_det([1.0, 0.0, 0.0, 0.0])], seq=0, idx=i) for i in range(10)]
    b = [make_record(10 + i, [make_det(np.eye(4)[i % 3] * 0.97 + 0.01)], seq=1, idx=i)
         for i in range(10)]
    # factors of 1 make stage C the deciding stage
    res = tcrb_select(a + b, np.zeros(3), 10, window=10, k1_factor=1, k2_factor=1)
    assert res.selected == list(range(10, 20))
    assert res.stages["C"] == [10]


def test_tcrb_windows_contiguous(rng):
    recs = crb_pool(rng, n=60, seqs=3)
    res = tcrb_select(recs, np.zeros(3), 23, window=5)
    assert len(res.selected) == len(set(res.selected)) == 23
    pos = {r.frame_id: (r.sequence_id, r.index_in_sequence) for r in recs}
    for k in res.stages["B"]:
        run = [fid for fid in res.selected if pos[fid][0] == pos[k][0]
               and 0 <= pos[fid][1] - pos[k][1] < 5]
        assert len(run) == 5
    with pytest.raises(ValueError):
        tcrb_select(recs[:3], np.zeros(3), 5, window=5)


def test_select_dispatch():
    recs = [make_record(i, [entropy_det(h)]) for i, h in enumerate([0.1, 0.6, 0.5])]
    assert select("entropy", recs, 2).selected == [1, 2]
    assert sorted(select("entropy", recs, 10).selected) == [0, 1, 2]
    flat = [make_record(i, []) for i in (8, 3, 5)]
    assert select("entropy", flat, 2).selected == [3, 5]
    with pytest.raises(ValueError):
        select("margin", recs, 1)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_contract(strategy, rng):
    recs = crb_pool(rng, n=30)
    for r in recs:
        r.pass_probs = [np.tile(d.probs, (3, 1)) for d in r.detections]
    opts = AcquisitionOptions(window=5)
    for b in (5, 12, 40):
        res = select(strategy, recs, b, seed=1, labeled_embeddings=[], labeled_hist=np.zeros(3),
                     options=opts)
        assert len(res.selected) == len(set(res.selected)) == min(b, 30)
        assert set(res.selected) <= {r.frame_id for r in recs}
        again = select(strategy, recs, b, seed=1, labeled_embeddings=[], labeled_hist=np.zeros(3),
                       options=opts)
        assert again.selected == res.selected
