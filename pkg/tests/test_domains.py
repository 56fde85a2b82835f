import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from udimlab.domains import (CORRUPTIONS, DatasetFormatError, DomainDataset, _base_moons, dumps_dataset,
                             load_dataset, loads_dataset, make_blobs_domains, make_glyphs,
                             make_glyphs_corrupted, make_moons_domains, merge, rotate, save_dataset, split)


def test_angle_zero_is_unrotated_base():
    doms = make_moons_domains(200, [0, 30], 0.1, seed=4)
    X, y = _base_moons(200, 0.1, np.random.default_rng(4))
    assert doms[0].inputs.tobytes() == X.tobytes()
    assert doms[0].labels.tobytes() == y.tobytes()


def test_rotation_arithmetic():
    np.testing.assert_allclose(rotate(np.array([[1.0, 0.0]]), 180.0), [[-1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(rotate(np.array([[1.0, 0.0]]), 90.0), [[0.0, 1.0]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(angle=st.floats(-360, 360), seed=st.integers(0, 1000))
def test_rotation_preserves_norms(angle, seed):
    P = np.random.default_rng(seed).normal(size=(20, 2))
    np.testing.assert_allclose(np.linalg.norm(rotate(P, angle), axis=1), np.linalg.norm(P, axis=1),
                               rtol=1e-12)


def test_moons_class_balance_and_validation():
    for d in make_moons_domains(500, [0, 15, 30, 45, 60], 0.1, seed=0):
        assert np.bincount(d.labels).tolist() == [250, 250]
    with pytest.raises(ValueError):
        make_moons_domains(100, [0, 15, 15], 0.1)
    with pytest.raises(ValueError):
        make_moons_domains(7, [0], 0.1)


def test_generators_are_pure():
    a = make_moons_domains(100, [0, 20], 0.1, seed=9)
    b = make_moons_domains(100, [0, 20], 0.1, seed=9)
    assert all(x.inputs.tobytes() == y.inputs.tobytes() for x, y in zip(a, b))
    g1 = make_glyphs_corrupted(40, "occlude", [0, 3], seed=2)
    g2 = make_glyphs_corrupted(40, "occlude", [0, 3], seed=2)
    assert all(x.inputs.tobytes() == y.inputs.tobytes() for x, y in zip(g1, g2))


def test_blobs_zero_shift_unit_scale_is_base():
    base, same = make_blobs_domains(300, 3, [[0, 0], [0, 0]], [1.0, 1.0], seed=1)
    assert base.inputs.tobytes() == same.inputs.tobytes()


def test_blobs_shift_displacement_doubles():
    n, C = 600, 3
    v = np.array([1.0, -0.5])
    base, d1, d2 = make_blobs_domains(n, C, [[0, 0], v, 2 * v], [1.0, 1.0, 1.0], seed=2)
    for c in range(C):
        mask = base.labels == c
        m0 = base.inputs[mask].mean(axis=0)
        disp1 = d1.inputs[mask].mean(axis=0) - m0
        disp2 = d2.inputs[mask].mean(axis=0) - m0
        tol = 3 * base.inputs[mask].std(axis=0) / np.sqrt(mask.sum())
        assert np.all(np.abs(disp2 - 2 * disp1) <= tol)


def test_blobs_scale_quarters_variance():
    base, half = make_blobs_domains(500, 2, [[0, 0], [0, 0]], [1.0, 0.5], seed=3)
    for c in range(2):
        mask = base.labels == c
        ratio = half.inputs[mask].var(axis=0, ddof=1) / base.inputs[mask].var(axis=0, ddof=1)
        assert np.all(np.abs(ratio - 0.25) <= 0.2 * 0.25)


def test_blobs_reject_nonpositive_scale():
    with pytest.raises(ValueError):
        make_blobs_domains(100, 2, [[0, 0]], [0.0])


def test_glyph_severity_zero_is_clean():
    X, y = make_glyphs(40, seed=5)
    for c in CORRUPTIONS:
        d0 = make_glyphs_corrupted(40, c, [0], seed=5)[0]
        assert d0.inputs.tobytes() == X.tobytes()
        assert d0.labels.tobytes() == y.tobytes()


def test_glyphs_are_balanced_images():
    X, y = make_glyphs(400, seed=0)
    assert X.shape == (400, 64)
    assert np.bincount(y).tolist() == [100] * 4
    assert X.min() >= 0.0 and X.max() <= 1.0


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_gauss_noise_std(k):
    X, _ = make_glyphs(500, seed=0)
    noisy = make_glyphs_corrupted(500, "gauss_noise", [k], seed=0)[0].inputs
    measured = (noisy - X).std()
    assert abs(measured - 0.05 * k) <= 0.1 * 0.05 * k


def test_contrast_preserves_labels():
    X, y = make_glyphs(100, seed=1)
    for d in make_glyphs_corrupted(100, "contrast", [1, 3, 5], seed=1):
        assert np.array_equal(d.labels, y)


@pytest.mark.parametrize("corruption", CORRUPTIONS)
def test_severity_is_monotone(corruption):
    doms = make_glyphs_corrupted(500, corruption, range(6), seed=0)
    clean = doms[0].inputs
    dist = [np.mean(np.linalg.norm(d.inputs - clean, axis=1)) for d in doms]
    assert all(b > a for a, b in zip(dist, dist[1:])), dist


def test_unknown_corruption_rejected():
    with pytest.raises(ValueError):
        make_glyphs_corrupted(40, "blur", [1])


def test_split_sizes_partition_and_determinism():
    d = make_moons_domains(500, [0], 0.1, seed=0)[0]
    tr, va, te = split(d, 0.6, 0.2, seed=3)
    for c in range(2):
        n_c = np.sum(d.labels == c)
        assert abs(np.sum(tr.labels == c) - 0.6 * n_c) <= 1
        assert abs(np.sum(va.labels == c) - 0.2 * n_c) <= 1
        assert abs(np.sum(te.labels == c) - 0.2 * n_c) <= 1
    rows = lambda ds: sorted(map(tuple, np.column_stack([ds.inputs, ds.labels]).tolist()))
    assert rows(merge([tr, va, te])) == rows(d)
    tr2, va2, te2 = split(d, 0.6, 0.2, seed=3)
    assert tr.inputs.tobytes() == tr2.inputs.tobytes() and te.inputs.tobytes() == te2.inputs.tobytes()


def test_split_rejects_tiny_class():
    d = DomainDataset("t", np.zeros((5, 2)), [0, 0, 0, 1, 1], 2)
    with pytest.raises(ValueError):
        split(d, 0.6, 0.2)


def test_file_round_trip(tmp_path):
    for d in make_moons_domains(60, [0, 37.5], 0.1, seed=1) + make_glyphs_corrupted(8, "pixelate", [2]):
        save_dataset(d, tmp_path / "d.udimds")
        back = load_dataset(tmp_path / "d.udimds")
        assert back.inputs.tobytes() == d.inputs.tobytes()
        assert back.labels.tobytes() == d.labels.tobytes()
        assert back.metadata == d.metadata and back.domain_id == d.domain_id


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=60, deadline=None)
@given(X=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=finite),
       data=st.data())
def test_round_trip_any_finite_floats(X, data):
    y = data.draw(arrays(np.int64, X.shape[0], elements=st.integers(0, 2)))
    meta = data.draw(st.dictionaries(st.from_regex(r"[a-z]{1,6}", fullmatch=True),
                                     st.one_of(st.integers(), st.text(max_size=5), finite), max_size=3))
    d = DomainDataset("h", X, y, 3, meta)
    back = loads_dataset(dumps_dataset(d))
    assert back.inputs.tobytes() == d.inputs.tobytes()
    assert back.metadata == d.metadata


def test_truncated_file_names_offset():
    d = make_moons_domains(20, [0], 0.1)[0]
    text = dumps_dataset(d)
    cut = text[: len(text) // 2]
    cut = cut[: cut.rfind("\n") + 1]
    with pytest.raises(DatasetFormatError) as info:
        loads_dataset(cut)
    assert info.value.offset == len(cut.encode())
    assert "byte" in str(info.value)


def test_bad_header_and_version():
    with pytest.raises(DatasetFormatError) as info:
        loads_dataset("UDIMDS v2 a 1 1 2\n\n0.0 0\n")
    assert info.value.offset == 7
    with pytest.raises(DatasetFormatError):
        loads_dataset("garbage\n")


def test_empty_dataset_rejected_at_save(tmp_path):
    d = DomainDataset("e", np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ValueError):
        save_dataset(d, tmp_path / "e.udimds")
    assert not (tmp_path / "e.udimds").exists()


def test_dataset_validation():
    with pytest.raises(ValueError):
        DomainDataset("x", np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        DomainDataset("x", np.array([[np.nan, 0.0]]), [0], 2)
