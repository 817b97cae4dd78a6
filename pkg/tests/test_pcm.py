import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sspcm.geometry import Heatmap, Keypoint, Pose, argmax_keypoints, identity_affine, \
    make_affine, render_gaussian_heatmaps, warp_heatmap
from sspcm.pcm import CANDIDATES, NO_PAIR, PAIR_INDEX, PAIRS, PLCache, pcm_correct, \
    pcm_correct_batch, position_inconsistency, select_pairs, update_pl_cache

HM = (16, 12)
# frozen oracle: 5 / sqrt(15**2 + 11**2), computed by hand
PI_3486 = 5 / 18.601075237738275


def hm_at(points, dims=HM, conf=1.0):
    return render_gaussian_heatmaps(Pose(np.array([[x, y, conf] for x, y in points]), "heatmap"),
                                    1.0, dims, dtype=np.float64)


def test_pi_corner_cases():
    assert position_inconsistency(Keypoint(3, 3, 1), Keypoint(3, 3, 0.5), HM) == 0.0
    assert position_inconsistency(Keypoint(0, 0, 1), Keypoint(11, 15, 1), HM) == 1.0


def test_pi_hand_value():
    assert position_inconsistency(Keypoint(3, 4, 1), Keypoint(6, 8, 1), HM) == pytest.approx(PI_3486, abs=1e-15)
    assert position_inconsistency(Keypoint(3, 4, 1), Keypoint(6, 8, 1), HM) == pytest.approx(0.2688, abs=1e-4)


def test_pi_requires_scored_keypoints():
    with pytest.raises(ValueError):
        position_inconsistency(Keypoint(1, 1, 0.0), Keypoint(2, 2, 1.0), HM)


def test_pairs_are_cross_model():
    for a, b in PAIRS:
        assert a[0] == "A" and b[0] == "B"
    assert PAIRS[0] == ("A_cur", "B_cur")
    assert [CANDIDATES[i] for i in PAIR_INDEX[0]] == ["A_cur", "B_cur"]


def test_outlier_excluded_brute_force():
    # A_last=(5,5) A_cur=(5,6) B_last=(5,5) B_cur=(14,2)
    pts = {"A_last": (5, 5), "A_cur": (5, 6), "B_last": (5, 5), "B_cur": (14, 2)}
    # brute-force enumeration of every cross pair
    dist = {p: math.dist(pts[p[0]], pts[p[1]]) for p in PAIRS}
    best = min(dist, key=dist.get)
    assert best == ("A_last", "B_last") and dist[best] == 0.0
    decoded = np.array([[[*pts[c], 1.0]] for c in CANDIDATES])[None]
    choice, pi = select_pairs(decoded, np.ones((1, 4), bool), (12, 16), 0.1)
    assert PAIRS[choice[0, 0]] == ("A_last", "B_last")
    assert pi[0, 0] == 0.0
    # same case end to end on a grid wide enough to hold x = 14
    cands = {c: hm_at([pts[c]], dims=(12, 16)) for c in CANDIDATES}
    res = pcm_correct(cands, identity_affine(), (12, 16), 0.1)
    assert res.pair == [("A_last", "B_last")]
    got = argmax_keypoints(res.fused.data)[0, :2]
    assert tuple(got) == (5.0, 5.0)


def test_same_argmax_everywhere():
    pts = [(3, 4), (8, 10)]
    cands = {c: hm_at(pts) for c in CANDIDATES}
    t = make_affine(20, 1.1, (5.5, 7.5))
    res = pcm_correct(cands, t, HM)
    assert np.array_equal(res.keypoint_mask, [1, 1])
    assert np.array_equal(res.pi, [0.0, 0.0])
    assert res.pair == [("A_cur", "B_cur")] * 2  # recency wins the tie
    want = 0.5 * (warp_heatmap(cands["A_cur"], t, HM).data + warp_heatmap(cands["B_cur"], t, HM).data)
    np.testing.assert_allclose(res.fused.data, want, atol=1e-12)


def test_epoch_zero_only_current_pair():
    a = hm_at([(3, 4)])
    b = hm_at([(4, 4)])
    t = make_affine(-15, 0.9, (5.5, 7.5))
    res = pcm_correct({"A_cur": a, "B_cur": b}, t, HM)
    assert res.pair == [("A_cur", "B_cur")]
    want = 0.5 * (warp_heatmap(a, t, HM).data + warp_heatmap(b, t, HM).data)
    np.testing.assert_allclose(res.fused.data, want, atol=1e-12)


def test_missing_current_candidate():
    with pytest.raises(ValueError):
        pcm_correct({"A_cur": hm_at([(1, 1)])}, identity_affine(), HM)
    stack = np.zeros((1, 4, 1, 16, 12))
    with pytest.raises(ValueError):
        pcm_correct_batch(stack, np.array([[True, False, True, True]]), np.eye(2, 3)[None], HM, 0.1)


def test_low_confidence_masked():
    a = hm_at([(3, 4), (5, 5)], conf=1.0)
    b = Heatmap(a.data * np.array([0.05, 1.0])[:, None, None])
    res = pcm_correct({"A_cur": a, "B_cur": b}, identity_affine(), HM, 0.1)
    assert np.array_equal(res.keypoint_mask, [0, 1])
    assert res.pair[0] is None and math.isnan(res.pi[0])
    assert not res.fused.data[0].any()


def test_threshold_filters_before_selection():
    # B_last agrees with A_cur but is below tau, so the farther B_cur is used
    cands = {"A_cur": hm_at([(3, 3)]), "B_cur": hm_at([(6, 3)]),
             "B_last": Heatmap(hm_at([(3, 3)]).data * 0.05)}
    res = pcm_correct(cands, identity_affine(), HM, 0.1)
    assert res.pair == [("A_cur", "B_cur")]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), tau=st.floats(0.0, 0.9))
def test_pair_exclusivity_and_fusion_bound(seed, tau):
    rng = np.random.default_rng(seed)
    n, k = 4, 3
    cands = rng.random((n, 4, k, 16, 12)) ** 4
    avail = rng.random((n, 4)) < 0.7
    avail[:, [1, 3]] = True
    t = np.tile(make_affine(rng.uniform(-60, 60), rng.uniform(0.75, 1.25), (5.5, 7.5)).matrix, (n, 1, 1))
    fused, mask, choice, pi = pcm_correct_batch(cands, avail, t, HM, tau)
    for i in range(n):
        for j in range(k):
            c = choice[i, j]
            if c == NO_PAIR:
                assert mask[i, j] == 0 and not fused[i, j].any()
                continue
            a, b = PAIR_INDEX[c]
            assert CANDIDATES[a][0] == "A" and CANDIDATES[b][0] == "B"
            assert avail[i, a] and avail[i, b]
            hi = max(cands[i, a, j].max(), cands[i, b, j].max())
            assert fused[i, j].min() >= 0 and fused[i, j].max() <= hi + 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_selection_is_minimal(seed):
    rng = np.random.default_rng(seed)
    decoded = np.concatenate([rng.integers(0, 12, (5, 4, 6, 2)), rng.random((5, 4, 6, 1))], axis=-1)
    avail = rng.random((5, 4)) < 0.8
    choice, pi = select_pairs(decoded, avail, HM, 0.2)
    for i in range(5):
        for j in range(6):
            ok = [p for p, (a, b) in enumerate(PAIR_INDEX)
                  if avail[i, a] and avail[i, b] and decoded[i, a, j, 2] >= 0.2 and decoded[i, b, j, 2] >= 0.2]
            if not ok:
                assert choice[i, j] == NO_PAIR
                continue
            d = [math.dist(decoded[i, PAIR_INDEX[p, 0], j, :2], decoded[i, PAIR_INDEX[p, 1], j, :2]) for p in ok]
            best = ok[int(np.argmin(d))]
            assert choice[i, j] == best


def test_cache_double_buffer():
    cache = PLCache([10, 11], (1, 2, 2))
    assert cache.get(10, "A") is None
    update_pl_cache(cache, 10, "A", np.ones((1, 2, 2)))
    assert cache.get(10, "A") is None  # staged, not yet visible
    update_pl_cache(cache, 10, "A", Heatmap(np.full((1, 2, 2), 2.0)))
    cache.promote()
    assert np.array_equal(cache.get(10, "A"), np.full((1, 2, 2), 2.0))  # last write wins
    assert cache.get(10, "B") is None and len(cache) == 1
    hms, has = cache.get_many([11, 10])
    assert has.tolist() == [[False, False], [True, False]]
    with pytest.raises(KeyError):
        cache.update(99, "A", np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        cache.update(10, "C", np.zeros((1, 2, 2)))
