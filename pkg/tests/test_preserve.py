import numpy as np
import pytest

from reference import naive_keep, naive_spatial, naive_temporal, naive_zscore
from specdeck.preserve import (KeepSet, RawScores, VisualTokenGrid, crop_slices, fuse_and_select,
                               keep_count, normalize_per_frame, prune_grid, score_spatial,
                               score_temporal, select_top_k)
from specdeck.synthetic import make_synthetic_grid


@pytest.mark.parametrize("ratio,n,k", [(0.1, 800, 80), (0.25, 2, 1), (0.05, 10, 1), (1.0, 7, 7),
                                       (0.001, 10, 1), (0.15, 10, 2)])
def test_keep_count(ratio, n, k):
    assert keep_count(ratio, n) == k


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_keep_count_rejects_out_of_range(ratio):
    with pytest.raises(ValueError):
        keep_count(ratio, 10)


def test_single_frame_temporal_score_is_zero():
    grid = VisualTokenGrid(np.random.default_rng(0).standard_normal((1, 3, 3, 4)))
    assert not score_temporal(grid).any()


def test_temporal_and_spatial_match_reference_with_zero_vectors():
    emb = np.random.default_rng(1).standard_normal((3, 4, 5, 3))
    emb[1, 2, 2] = 0.0
    grid = VisualTokenGrid(emb)
    np.testing.assert_allclose(score_temporal(grid), naive_temporal(emb), atol=1e-12)
    np.testing.assert_allclose(score_spatial(grid, 2), naive_spatial(emb, 2), atol=1e-12)


def test_crop_slices_cover_grid_once():
    hits = np.zeros((7, 6), dtype=int)
    for rs, cs in crop_slices(7, 6, 5):
        hits[rs, cs] += 1
    assert (hits == 1).all()


def test_static_background_temporal_only_on_patch():
    grid, _ = make_synthetic_grid(4, 8, 8, 6, "static_background", seed=2)
    temp = score_temporal(grid)
    patch = np.zeros((8, 8), dtype=bool)
    patch[3:5, 3:5] = True
    assert np.abs(temp[:, ~patch]).max() < 1e-9
    assert temp[:, patch].min() > 1e-3


def test_normalize_matches_reference_and_constant_frame_is_zero():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((3, 4, 4))
    s[1] = 2.5
    np.testing.assert_allclose(normalize_per_frame(s), naive_zscore(s.tolist()), atol=1e-12)
    assert not normalize_per_frame(s)[1].any()


def test_constant_scores_select_first_tokens_in_index_order():
    raw = RawScores(np.ones((2, 2, 2)), np.zeros((2, 2, 2)), np.full((2, 2, 2), 3.0))
    smap, keep = fuse_and_select(raw, 0.25)
    assert not smap.fused.any()
    assert keep.indices == ((0, 0, 0), (0, 0, 1))


def test_dominant_token_always_kept():
    rng = np.random.default_rng(4)
    scores = [rng.uniform(0, 1, (2, 3, 3)) for _ in range(3)]
    for s in scores:
        s[1, 2, 0] = 5.0
    _, keep = fuse_and_select(RawScores(*scores), 1 / 18)
    assert keep.indices == ((1, 2, 0),)


def test_crafted_scores_match_exhaustive_sort():
    attn = np.array([[[0.9, 0.1], [0.2, 0.3]], [[0.5, 0.5], [0.1, 0.8]]])
    temp = np.array([[[0.0, 1.0], [0.5, 0.2]], [[0.3, 0.3], [0.9, 0.0]]])
    spa = np.array([[[0.2, 0.2], [0.7, 0.1]], [[0.4, 0.6], [0.6, 0.4]]])
    smap, keep = fuse_and_select(RawScores(attn, temp, spa), 0.25)
    fused = np.add(np.add(naive_zscore(attn.tolist()), naive_zscore(temp.tolist())), naive_zscore(spa.tolist()))
    np.testing.assert_allclose(smap.fused, fused, atol=1e-12)
    assert keep.indices == naive_keep(fused.tolist(), 0.25)


def test_criteria_subset_and_validation():
    rng = np.random.default_rng(5)
    raw = RawScores(*(rng.standard_normal((2, 3, 3)) for _ in range(3)))
    smap, keep = fuse_and_select(raw, 0.2, ("attn",))
    np.testing.assert_allclose(smap.fused, normalize_per_frame(raw.attn))
    assert smap.criteria == ("attn",)
    assert keep == select_top_k(normalize_per_frame(raw.attn), 0.2)
    with pytest.raises(ValueError):
        fuse_and_select(raw, 0.2, ("bogus",))
    with pytest.raises(ValueError):
        fuse_and_select(raw, 0.2, ())


def test_full_keep_ratio_keeps_everything():
    raw = RawScores(*(np.random.default_rng(6).standard_normal((2, 2, 3)) for _ in range(3)))
    _, keep = fuse_and_select(raw, 1.0)
    assert len(keep) == 12
    assert keep.mask().all()


def test_keep_set_json_roundtrip_and_validation():
    keep = KeepSet.from_flat([5, 0, 3], 0.5, (1, 2, 3))
    assert keep.indices == ((0, 0, 0), (0, 1, 0), (0, 1, 2))
    assert KeepSet.from_json(keep.to_json()) == keep
    with pytest.raises(ValueError):
        KeepSet.from_json('{"format": "other"}')
    bad = keep.to_json().replace("[0, 1, 2]", "[0, 2, 2]")
    with pytest.raises(ValueError):
        KeepSet.from_json(bad)


def test_prune_grid_frame_major_order():
    emb = np.arange(2 * 2 * 2 * 1, dtype=float).reshape(2, 2, 2, 1)
    grid = VisualTokenGrid(emb)
    keep = KeepSet.from_flat([6, 1, 4], 0.4, grid.shape)
    pruned = prune_grid(grid, keep)
    assert pruned.embeddings[:, 0].tolist() == [1.0, 4.0, 6.0]
    assert pruned.positions.tolist() == [[0, 0, 1], [1, 0, 0], [1, 1, 0]]
    with pytest.raises(ValueError):
        prune_grid(VisualTokenGrid(np.zeros((1, 2, 2, 1))), keep)
