import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gem2.errors import FeatureError, InputError
from gem2.featurize import (
    ATOM_BLOCK_WIDTHS,
    BOND_TYPES,
    Atom,
    Bond,
    FeaturizerConfig,
    MoleculeRecord,
    RbfSpec,
    featurize,
    load_features,
    max_topo_dist,
    one_hot_features,
    pair_distance,
    read_jsonl,
    rbf_expand,
    save_features,
    topo_distance,
    triplet_angles,
    write_jsonl,
)
from gem2.synth import path_molecule, random_molecule, synthetic_dataset


def mol(n, bonds=(), coords=None, **atom_kw):
    atoms = tuple(Atom(6, **atom_kw) for _ in range(n))
    if coords is None:
        coords = np.random.default_rng(n).normal(size=(n, 3))
    return MoleculeRecord(atoms, tuple(Bond(i, j) for i, j in bonds), np.asarray(coords, dtype=float))


def ring(n):
    angles = 2 * np.pi * np.arange(n) / n
    coords = np.stack([1.4 * np.cos(angles), 1.4 * np.sin(angles), np.zeros(n)], axis=1)
    return mol(n, [(i, (i + 1) % n) for i in range(n)], coords)


# --- records ------------------------------------------------------------------------------

def test_record_rejects_bad_bonds():
    with pytest.raises(InputError):
        mol(2, [(0, 2)])
    with pytest.raises(InputError):
        mol(2, [(1, 1)])
    with pytest.raises(InputError):
        mol(3, [(0, 1), (1, 0)])


def test_record_rejects_coord_count():
    with pytest.raises(InputError):
        mol(3, coords=np.zeros((2, 3)))


def test_jsonl_roundtrip_and_line_numbers(tmp_path):
    recs = synthetic_dataset(3, seed=1)
    path = tmp_path / "m.jsonl"
    write_jsonl(path, recs)
    back = read_jsonl(path)
    assert [r.id for r in back] == [r.id for r in recs]
    np.testing.assert_array_equal(back[1].coords, recs[1].coords)
    with open(path, "a") as fh:
        fh.write('{"atoms": [{"atomic_number": 6}], "bonds": [{"i": 0, "j": 4}]}\n')
    with pytest.raises(InputError, match=":4:"):
        read_jsonl(path)


# --- one-hot ------------------------------------------------------------------------------

def test_one_hot_shapes():
    atoms, pairs = one_hot_features(mol(3, [(0, 1)]))
    assert [b.shape for b in atoms] == [(3, w) for w in ATOM_BLOCK_WIDTHS]
    assert [b.shape for b in atoms] == [(3, 119), (3, 2), (3, 16), (3, 4), (3, 11), (3, 9), (3, 5)]
    # the three pair blocks carry one extra "no bond" category each
    assert [b.shape for b in pairs] == [(3, 3, 8), (3, 3, 5), (3, 3, 3)]
    for block in atoms + pairs:
        np.testing.assert_array_equal(block.sum(-1), 1.0)


def test_carbon_and_aromatic():
    atoms, _ = one_hot_features(mol(1, aromatic=True))
    assert atoms[0][0, 6] == 1.0 and atoms[0][0].sum() == 1.0
    np.testing.assert_array_equal(atoms[1][0], [0.0, 1.0])


def test_non_bonded_pair_is_no_bond():
    _, (bond_dir, bond_type, in_ring) = one_hot_features(mol(3, [(0, 1)]))
    assert bond_type[0, 2, -1] == 1.0 and bond_type[0, 2, :-1].sum() == 0.0
    assert bond_dir[0, 2, -1] == 1.0 and in_ring[0, 2, -1] == 1.0
    assert bond_type[0, 1, BOND_TYPES.index("single")] == 1.0 and bond_type[0, 1, -1] == 0.0


def test_out_of_range_category_names_atom():
    rec = MoleculeRecord((Atom(6), Atom(119)), (), np.zeros((2, 3)))
    with pytest.raises(FeatureError, match="atom 1"):
        one_hot_features(rec)
    rec = MoleculeRecord((Atom(6, hybridization="sp4"),), (), np.zeros((1, 3)))
    with pytest.raises(FeatureError, match="atom 0"):
        one_hot_features(rec)


# --- topology -----------------------------------------------------------------------------

def test_topo_path_and_diagonal():
    d = topo_distance(mol(3, [(0, 1), (1, 2)]))
    assert d[0, 2] == 2
    np.testing.assert_array_equal(np.diag(d), 0)


def test_topo_benzene_opposite():
    d = topo_distance(ring(6))
    assert d[0, 3] == 3 and d[1, 4] == 3
    assert max_topo_dist(d) == 3


def test_topo_disconnected_sentinel():
    d = topo_distance(mol(4, [(0, 1)]))
    assert d[0, 2] == 4 and d[2, 3] == 4
    assert max_topo_dist(d) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_topo_metric_properties(seed):
    rec = random_molecule(np.random.default_rng(seed), 2, 9)
    d = topo_distance(rec)
    n = rec.num_atoms
    np.testing.assert_array_equal(d, d.T)
    conn = d < n
    for k in range(n):
        ok = conn[:, k, None] & conn[None, k, :]
        assert np.all(d[ok] <= (d[:, k, None] + d[None, k, :])[ok])


def test_path_molecule_diameter():
    assert max_topo_dist(path_molecule(8)) == 7
    assert max_topo_dist(path_molecule(13)) == 12


# --- geometry -----------------------------------------------------------------------------

def test_pair_distance_345():
    d = pair_distance(mol(2, coords=[[0, 0, 0], [3, 4, 0]]))
    assert d[0, 1] == 5.0
    np.testing.assert_array_equal(np.diag(d), 0.0)


def test_pair_distance_exactly_symmetric():
    d = pair_distance(mol(7, coords=np.random.default_rng(0).normal(size=(7, 3)) * 10))
    assert np.array_equal(d, d.T)


def test_missing_coords():
    rec = MoleculeRecord((Atom(6), Atom(6)), (), None)
    with pytest.raises(InputError):
        pair_distance(rec)
    with pytest.raises(InputError):
        triplet_angles(rec)


def test_equilateral_angles():
    h = math.sqrt(3) / 2
    a = triplet_angles(mol(3, coords=[[0, 0, 0], [1, 0, 0], [0.5, h, 0]]))
    np.testing.assert_allclose(a[0, 1, 2], [math.pi / 3] * 3, atol=1e-12)


def test_right_isoceles_angles():
    a = triplet_angles(mol(3, coords=[[0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    np.testing.assert_allclose(a[0, 1, 2], [math.pi / 2, math.pi / 4, math.pi / 4], atol=1e-12)


def test_degenerate_triplets_are_zero():
    a = triplet_angles(mol(4, coords=[[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]))
    np.testing.assert_array_equal(a[0, 0, 3], 0.0)
    np.testing.assert_array_equal(a[1, 3, 3], 0.0)
    np.testing.assert_array_equal(a[0, 1, 2], 0.0)  # collinear
    assert a[0, 1, 3].sum() == pytest.approx(math.pi)


# --- RBF ----------------------------------------------------------------------------------

def test_rbf_centers_and_values():
    spec = RbfSpec(0.0, 2.0)
    assert spec.width == 21
    assert np.all(np.diff(spec.centers) > 0)
    np.testing.assert_allclose(np.diff(spec.centers), 0.1, atol=1e-15)
    e = rbf_expand(spec.centers[7], spec)
    assert e[7] == 1.0
    assert rbf_expand(spec.centers[7] + 0.1, spec)[7] == pytest.approx(0.904837418, abs=1e-9)
    x = np.linspace(-3, 5, 50)
    e = rbf_expand(x, spec)
    assert np.all(e <= 1.0) and np.all(e > 0.0)


def test_rbf_derivative_matches_closed_form():
    spec = RbfSpec(0.0, 3.0)
    x, h = 1.234, 1e-5
    fd = (rbf_expand(x + h, spec) - rbf_expand(x - h, spec)) / (2 * h)
    exact = -2 * spec.gamma * (x - spec.centers) * rbf_expand(x, spec)
    big = np.abs(exact) > 1e-8
    assert np.max(np.abs(fd[big] - exact[big]) / np.abs(exact[big])) < 1e-6


def test_default_widths():
    assert FeaturizerConfig().widths == (166, 318, 699)
    assert FeaturizerConfig(hop=RbfSpec(0, 10)).widths == (166, 218, 399)


# --- featurize ----------------------------------------------------------------------------

def test_bonded_carbons():
    fc = FeaturizerConfig()
    fs = featurize(mol(2, [(0, 1)], coords=[[0, 0, 0], [1.5, 0, 0]]), fc)
    x = fs.x2[0, 1]
    assert x[8 + BOND_TYPES.index("single")] == 1.0
    dist_block = x[-fc.distance.width :]
    assert int(np.argmax(dist_block)) == 15
    assert dist_block[15] == pytest.approx(1.0)


def test_single_atom():
    fs = featurize(mol(1))
    assert fs.x2.shape[:2] == (1, 1) and fs.x3.shape[:3] == (1, 1, 1)
    c = FeaturizerConfig()
    angle = fs.x3[0, 0, 0, : 3 * c.angle.width].reshape(3, -1)
    np.testing.assert_array_equal(angle, np.tile(rbf_expand(0.0, c.angle), (3, 1)))


def test_feature_widths_match_config():
    fc = FeaturizerConfig()
    fs = featurize(synthetic_dataset(1, seed=3)[0], fc)
    assert (fs.x1.shape[-1], fs.x2.shape[-1], fs.x3.shape[-1]) == fc.widths


def test_x2_symmetric():
    fs = featurize(synthetic_dataset(1, seed=4)[0])
    np.testing.assert_array_equal(fs.x2, fs.x2.transpose(1, 0, 2))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_featurize_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    rec = random_molecule(rng, 2, 7)
    perm = rng.permutation(rec.num_atoms)
    a = featurize(rec).permuted(perm)
    b = featurize(rec.permuted(perm))
    for name in ("x1", "x2", "x3", "topo_dist"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-12)


def test_feature_cache_roundtrip(tmp_path):
    fs = featurize(synthetic_dataset(1, seed=5)[0])
    path = tmp_path / "f.gem2fs"
    save_features(path, fs)
    assert path.read_bytes()[:9] == b"GEM2FS\0\x01\x00"
    back = load_features(path)
    for name in ("x1", "x2", "x3", "atom_mask", "topo_dist"):
        np.testing.assert_array_equal(getattr(back, name), getattr(fs, name))


def test_feature_cache_bad_magic(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"NOTAFILE")
    with pytest.raises(InputError):
        load_features(path)


def test_padding_masks_extra_atoms():
    fs = featurize(synthetic_dataset(1, seed=6)[0])
    n = fs.num_atoms
    p = fs.padded(n + 2)
    assert p.atom_mask.tolist() == [True] * n + [False, False]
    assert p.topo_dist[0, n] == n + 2 and p.topo_dist[n, n] == 0
