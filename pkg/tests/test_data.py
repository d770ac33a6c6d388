import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flare.data import (Sample, cg_solve, coefficient_field, compute_stats, darcy_operator,
                        denormalize, generate_darcy_sample, generate_split, normalize, read_meta,
                        read_pcf, solve_darcy, write_meta, write_pcf)
from flare.errors import (ConfigError, ConvergenceError, InvalidValueError, MagicError,
                          TruncationError, VersionError)


# --- conjugate gradients ----------------------------------------------------

def test_cg_identity_one_iteration(rng):
    b = rng.standard_normal(7)
    iters = []
    x = cg_solve(lambda v: v, b, tol=1e-12, callback=lambda k, x, r: iters.append(k))
    np.testing.assert_allclose(x, b, atol=1e-15)
    assert iters == [1]


def test_cg_two_by_two():
    a = np.array([[4.0, 1.0], [1.0, 3.0]])
    x = cg_solve(lambda v: a @ v, np.array([1.0, 2.0]), tol=1e-14)
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], atol=1e-15)


def test_cg_random_spd_matches_direct(rng):
    m = rng.standard_normal((50, 50))
    a = m @ m.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = cg_solve(lambda v: a @ v, b, tol=1e-12)
    assert np.max(np.abs(x - np.linalg.solve(a, b))) <= 1e-8


def test_cg_reports_non_convergence(rng):
    m = rng.standard_normal((30, 30))
    a = m @ m.T + 1e-3 * np.eye(30)
    with pytest.raises(ConvergenceError) as info:
        cg_solve(lambda v: a @ v, rng.standard_normal(30), tol=1e-14, max_iters=3)
    assert info.value.residual > 1e-14


def test_cg_zero_rhs():
    assert not cg_solve(lambda v: v, np.zeros(4)).any()


# --- generator --------------------------------------------------------------

@pytest.fixture(scope="module")
def sample32():
    return generate_darcy_sample(32, 11)


def test_coefficient_phases(sample32):
    a = sample32.features[:, 2]
    assert set(np.unique(a)) == {3.0, 12.0}
    assert abs(np.mean(a == 12.0) - 0.5) <= 0.05


def test_coefficient_field_is_smooth():
    a = coefficient_field(64, np.random.default_rng(0))
    # box blurring before thresholding yields connected blobs, not salt and pepper
    changes = np.mean(a[1:, :] != a[:-1, :])
    assert changes < 0.15


def test_sample_layout(sample32):
    assert sample32.n_points == 1024
    assert sample32.coords.shape == (1024, 2) and sample32.features.shape == (1024, 3)
    assert sample32.labels.shape == (1024, 1)
    assert sample32.coords.min() == 0.0 and sample32.coords.max() == 1.0
    np.testing.assert_array_equal(sample32.features[:, :2], sample32.coords)


def test_boundary_is_zero(sample32):
    u = sample32.labels.reshape(32, 32)
    for edge in (u[0], u[-1], u[:, 0], u[:, -1]):
        assert not edge.any()


def test_discrete_residual(sample32):
    a = sample32.features[:, 2].reshape(32, 32)
    u = sample32.labels.reshape(32, 32)
    op = darcy_operator(a)
    b = np.ones(30 * 30)
    assert np.linalg.norm(op(u[1:-1, 1:-1].ravel()) - b) / np.linalg.norm(b) <= 1e-8


def test_operator_against_assembled_matrix():
    g = 6
    a = coefficient_field(g, np.random.default_rng(2))
    h2 = (1.0 / (g - 1)) ** 2
    hm = lambda p, q: 2 * p * q / (p + q)
    n = (g - 2) ** 2
    idx = lambda i, j: (i - 1) * (g - 2) + (j - 1)
    mat = np.zeros((n, n))
    for i in range(1, g - 1):
        for j in range(1, g - 1):
            r = idx(i, j)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                c = hm(a[i, j], a[i + di, j + dj]) / h2
                mat[r, r] += c
                if 0 < i + di < g - 1 and 0 < j + dj < g - 1:
                    mat[r, idx(i + di, j + dj)] -= c
    op = darcy_operator(a)
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1
        np.testing.assert_allclose(op(e), mat[:, k], rtol=1e-14, atol=1e-10)
    np.testing.assert_allclose(mat, mat.T)


def test_maximum_principle(sample32):
    u = sample32.labels.reshape(32, 32)
    assert u.min() >= 0
    i, j = np.unravel_index(np.argmax(u), u.shape)
    assert 0 < i < 31 and 0 < j < 31
    assert u.max() > 0


def test_scaling_coefficients_scales_solution():
    a = coefficient_field(16, np.random.default_rng(5))
    u = solve_darcy(a)
    u3 = solve_darcy(3.0 * a)
    rel = np.linalg.norm(u3 - u / 3.0) / np.linalg.norm(u / 3.0)
    assert rel <= 1e-8


def test_generation_deterministic():
    a, b = generate_darcy_sample(16, 3), generate_darcy_sample(16, 3)
    for x, y in zip((a.coords, a.features, a.labels), (b.coords, b.features, b.labels)):
        assert x.tobytes() == y.tobytes()
    c = generate_darcy_sample(16, 4)
    assert c.features.tobytes() != a.features.tobytes()


def test_grid_minimum():
    with pytest.raises(ConfigError):
        generate_darcy_sample(4, 0)


def test_split_manifest():
    train, test, manifest = generate_split(8, 3, 2, seed=9)
    assert len(train) == 3 and len(test) == 2
    assert len(set(manifest["train"] + manifest["test"])) == 5
    again = generate_darcy_sample(8, manifest["test"][1])
    assert again.labels.tobytes() == test[1].labels.tobytes()


# --- normalization ----------------------------------------------------------

def test_normalized_train_stats():
    train, _, _ = generate_split(8, 6, 0, seed=1)
    norm, stats = normalize(train)
    f = np.concatenate([s.features for s in norm])
    y = np.concatenate([s.labels for s in norm])
    assert np.abs(f.mean(axis=0)).max() < 1e-10 and np.abs(y.mean(axis=0)).max() < 1e-10
    np.testing.assert_allclose(f.std(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-10)


def test_test_split_reuses_train_stats():
    train, test, _ = generate_split(8, 4, 2, seed=1)
    _, stats = normalize(train)
    norm_test, same = normalize(test, stats)
    assert same is stats
    np.testing.assert_allclose(norm_test[0].features,
                               (test[0].features - stats.feature_mean) / stats.feature_std)


def test_normalize_roundtrip():
    train, _, _ = generate_split(8, 3, 0, seed=2)
    norm, stats = normalize(train)
    back = denormalize(norm, stats)
    for a, b in zip(train, back):
        np.testing.assert_allclose(b.features, a.features, rtol=4e-16, atol=4e-16)
        np.testing.assert_allclose(b.labels, a.labels, rtol=4e-16, atol=1e-18)


def test_constant_column_gets_unit_std():
    s = Sample(np.zeros((4, 1)), np.column_stack([np.arange(4.0), np.full(4, 7.0)]),
               np.arange(4.0)[:, None])
    norm, stats = normalize([s])
    assert stats.feature_std[1] == 1.0
    assert not norm[0].features[:, 1].any()


def test_stats_need_data():
    with pytest.raises(InvalidValueError):
        compute_stats([])


# --- PCF files --------------------------------------------------------------

def variable_samples(seed):
    r = np.random.default_rng(seed)
    out = []
    for n in (5, 1, 12):
        out.append(Sample(r.random((n, 2)), r.standard_normal((n, 3)), r.standard_normal((n, 2))))
    return out


def test_pcf_roundtrip_variable_lengths(tmp_path):
    samples = variable_samples(0)
    path = tmp_path / "x.pcf"
    write_pcf(path, samples)
    back = read_pcf(path)
    assert [s.n_points for s in back] == [5, 1, 12]
    for a, b in zip(samples, back):
        for x, y in zip((a.coords, a.features, a.labels), (b.coords, b.features, b.labels)):
            assert y.dtype == np.float32
            assert y.tobytes() == x.astype(np.float32).tobytes()
    write_pcf(tmp_path / "y.pcf", back)
    assert (tmp_path / "y.pcf").read_bytes() == path.read_bytes()


def test_pcf_header_layout(tmp_path):
    write_pcf(tmp_path / "x.pcf", variable_samples(1))
    buf = (tmp_path / "x.pcf").read_bytes()
    assert struct.unpack_from("<4sIQ", buf) == (b"PCF1", 1, 3)
    assert struct.unpack_from("<QIII", buf, 16) == (5, 2, 3, 2)


def test_pcf_bad_magic(tmp_path):
    (tmp_path / "x.pcf").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(MagicError):
        read_pcf(tmp_path / "x.pcf")


def test_pcf_bad_version(tmp_path):
    (tmp_path / "x.pcf").write_bytes(struct.pack("<4sIQ", b"PCF1", 9, 0))
    with pytest.raises(VersionError):
        read_pcf(tmp_path / "x.pcf")


def test_pcf_truncated_at_declared_index(tmp_path):
    samples = variable_samples(2)
    path = tmp_path / "x.pcf"
    write_pcf(path, samples)
    buf = bytearray(path.read_bytes())
    buf[8:16] = struct.pack("<Q", 5)           # claims 5 samples, holds 3
    path.write_bytes(bytes(buf))
    with pytest.raises(TruncationError, match="sample index 3"):
        read_pcf(path)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_pcf_roundtrip_property(tmp_path_factory, lengths, seed):
    r = np.random.default_rng(seed)
    samples = [Sample(r.random((n, 2)), r.standard_normal((n, 1)), r.standard_normal((n, 1)))
               for n in lengths]
    path = tmp_path_factory.mktemp("pcf") / "p.pcf"
    write_pcf(path, samples)
    back = read_pcf(path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert b.labels.tobytes() == a.labels.astype(np.float32).tobytes()


def test_meta_roundtrip(tmp_path):
    train, _, manifest = generate_split(8, 2, 1, seed=0)
    stats = compute_stats(train)
    write_meta(tmp_path / "m.json", stats, {"grid": 8}, manifest)
    meta = read_meta(tmp_path / "m.json")
    np.testing.assert_array_equal(meta["norm_stats"].label_std, stats.label_std)
    assert meta["split"] == manifest and meta["generator"] == {"grid": 8}
