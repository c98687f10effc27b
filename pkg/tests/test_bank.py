import numpy as np
import pytest

from oracles import covering_radius, greedy_coreset_oracle, nn_oracle
from xmad.bank import (
    MemoryBank,
    PatchSet,
    build_bank,
    collect_patches,
    coreset_select,
    distance,
    load_bank,
    make_projection,
    nn_query,
    save_bank,
)
from xmad.errors import DataError, DegenerateInputError
from xmad.io import FeatureMap

# ---------------------------------------------------------------------------
# patch collection


def test_collect_patches_skips_background():
    a = np.zeros((2, 2, 3), dtype=np.float32)
    a[0, 0] = (1.0, 2.0, 3.0)
    a[1, 1] = (4.0, 5.0, 6.0)
    pset = collect_patches([FeatureMap(a)], sample_ids=["s0"])
    assert pset.patches.shape == (2, 3)
    assert pset.origins == [("s0", 0), ("s0", 3)]


def test_collect_patches_keeps_everything_when_asked():
    a = np.zeros((2, 2, 3), dtype=np.float32)
    pset = collect_patches([FeatureMap(a)], skip_background=False)
    assert pset.patches.shape == (4, 3)


def test_collect_patches_validation():
    with pytest.raises(DegenerateInputError, match="no feature maps"):
        collect_patches([])
    with pytest.raises(DegenerateInputError, match="background"):
        collect_patches([FeatureMap(np.zeros((2, 2, 3), dtype=np.float32))])
    with pytest.raises(ValueError, match="dim mismatch"):
        collect_patches(
            [
                FeatureMap(np.ones((2, 2, 3), dtype=np.float32)),
                FeatureMap(np.ones((2, 2, 4), dtype=np.float32)),
            ]
        )


# ---------------------------------------------------------------------------
# projection


def test_projection_entry_distribution():
    proj = make_projection(2000, 64, density=0.25, seed=0)
    scale = np.sqrt(1.0 / (0.25 * 64))
    values, counts = np.unique(proj.matrix, return_counts=True)
    assert np.allclose(values, [-scale, 0.0, scale])
    total = proj.matrix.size
    assert counts[1] / total == pytest.approx(0.75, abs=0.01)
    assert counts[0] / total == pytest.approx(0.125, abs=0.01)
    assert counts[2] / total == pytest.approx(0.125, abs=0.01)


def test_projection_default_density():
    proj = make_projection(400, 10, seed=1)
    assert proj.density == pytest.approx(1.0 / 20.0)


def test_projection_roughly_preserves_distances():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(40, 512))
    proj = make_projection(512, 128, seed=3)
    low = pts @ proj.matrix
    for _ in range(50):
        i, j = rng.integers(40, size=2)
        if i == j:
            continue
        d_hi = np.linalg.norm(pts[i] - pts[j])
        d_lo = np.linalg.norm(low[i] - low[j])
        assert 0.6 * d_hi < d_lo < 1.5 * d_hi


def test_projection_validation():
    with pytest.raises(ValueError, match="d_target"):
        make_projection(8, 9)
    with pytest.raises(ValueError, match="density"):
        make_projection(8, 4, density=1.5)


# ---------------------------------------------------------------------------
# coreset selection


def test_coreset_matches_greedy_oracle():
    rng = np.random.default_rng(4)
    for metric in ("l2", "l1", "cosine"):
        for trial in range(10):
            n = int(rng.integers(5, 40))
            pts = rng.normal(size=(n, 4)) + 2.0  # offset keeps cosine defined
            k = int(rng.integers(1, n + 1))
            start = int(rng.integers(n))
            got = coreset_select(pts, k / n, metric=metric, start=start)
            want = greedy_coreset_oracle(pts, k, metric, start)
            assert got.tolist() == want


def test_coreset_first_pick_seeded():
    pts = np.random.default_rng(5).normal(size=(30, 3))
    a = coreset_select(pts, 0.3, seed=9)
    b = coreset_select(pts, 0.3, seed=9)
    assert np.array_equal(a, b)
    assert a[0] == int(np.random.default_rng(9).integers(30))


def test_coreset_projection_changes_selection_space():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(60, 64))
    proj = make_projection(64, 8, density=0.5, seed=0)
    plain = coreset_select(pts, 0.25, start=0)
    projected = coreset_select(pts, 0.25, projection=proj, start=0)
    manual = greedy_coreset_oracle(pts @ proj.matrix, len(projected), "l2", 0)
    assert projected.tolist() == manual
    assert plain.tolist() != projected.tolist()  # different space, different picks


def test_coreset_ties_take_lowest_index():
    pts = np.array([[0.0], [1.0], [1.0], [0.5]])
    got = coreset_select(pts, 0.5, start=0)
    assert got.tolist() == [0, 1]  # index 1 beats the equidistant duplicate 2


def test_coreset_covering_radius_bound():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(100, 5))
    idx = coreset_select(pts, 0.1, start=0)
    rad_full = covering_radius(pts, list(range(100)))
    assert rad_full == 0.0
    # greedy max-min radius shrinks monotonically with more picks
    r_small = covering_radius(pts, coreset_select(pts, 0.05, start=0).tolist())
    r_large = covering_radius(pts, idx.tolist())
    assert r_large <= r_small


def test_coreset_validation():
    pts = np.zeros((4, 2))
    with pytest.raises(ValueError, match="fraction"):
        coreset_select(pts, 0.0)
    with pytest.raises(ValueError, match="start"):
        coreset_select(pts, 0.5, start=4)
    with pytest.raises(DegenerateInputError):
        coreset_select(np.zeros((0, 2)), 0.5)


# ---------------------------------------------------------------------------
# bank build / query


def test_build_bank_rows_are_exact_unprojected_values():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(50, 32))
    proj = make_projection(32, 4, density=0.5, seed=1)
    bank = build_bank(pts, 0.2, projection=proj, seed=2, modality="pc")
    idx = coreset_select(pts, 0.2, projection=proj, seed=2)
    assert np.array_equal(bank.rows, pts[idx])
    assert bank.projection == {"d_target": 4, "density": 0.5, "seed": 1}
    assert bank.modality == "pc"


def test_nn_query_matches_oracle():
    rng = np.random.default_rng(9)
    bank = MemoryBank(rng.normal(size=(20, 6)), metric="l1")
    queries = rng.normal(size=(15, 6))
    dists, idx = nn_query(bank, queries)
    ref_d, ref_i = nn_oracle(queries, bank.rows, "l1")
    assert np.array_equal(dists, ref_d)
    assert np.array_equal(idx, ref_i)


def test_nn_query_single_vector_and_ties():
    bank = MemoryBank(np.array([[1.0, 0.0], [1.0, 0.0], [3.0, 0.0]]))
    d, i = nn_query(bank, np.array([0.0, 0.0]))
    assert d == 1.0
    assert i == 0  # tie between rows 0 and 1 goes to the lowest index
    with pytest.raises(ValueError, match="dim"):
        nn_query(bank, np.zeros(3))


def test_bank_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    rows = rng.normal(size=(12, 5)).astype(np.float32).astype(np.float64)
    bank = MemoryBank(
        rows,
        metric="cosine",
        modality="rgb",
        fraction=0.3,
        seed=4,
        source={"n_patches": 40},
    )
    save_bank(tmp_path / "b", bank)
    back = load_bank(tmp_path / "b")
    # rows chosen representable in f32 so persistence is exact
    assert np.array_equal(back.rows, bank.rows)
    assert back.metric == "cosine"
    assert back.modality == "rgb"
    assert back.fraction == 0.3
    assert back.source == {"n_patches": 40}
    # queries against the loaded bank behave identically
    q = rng.normal(size=(7, 5))
    assert nn_query(back, q)[0].tolist() == nn_query(bank, q)[0].tolist()


def test_load_bank_errors(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        load_bank(tmp_path / "none")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text('{"format": "not-a-bank"}')
    with pytest.raises(DataError, match="format"):
        load_bank(bad)


def test_distance_helper():
    assert distance([0.0, 0.0], [3.0, 4.0]) == 5.0
    assert distance([0.0, 0.0], [3.0, 4.0], "l1") == 7.0
