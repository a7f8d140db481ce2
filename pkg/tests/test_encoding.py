import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from dwtnerf.encoding import (PRIMES, SH_BASIS, HashGridConfig, hash_encode, hybrid_concat, init_hash_tables,
                              sh_encode)
from dwtnerf.tensor import ShapeError, Tensor

from helpers import gradcheck


def small_config(**kw):
    base = dict(levels=3, features_per_level=2, table_size=2 ** 8, base_resolution=3, growth_factor=2.0)
    base.update(kw)
    return HashGridConfig(**base)


def table_row(corner, res, dense, T):
    if dense:
        return corner[0] + (res + 1) * corner[1] + (res + 1) ** 2 * corner[2]
    h = 0
    for c, p in zip(corner, PRIMES):
        h ^= (int(c) * p) & 0xFFFFFFFFFFFFFFFF
    return h & (T - 1)


def loop_hash_encode(x, cfg, tables):
    """Per point, per level, per corner: explicit trilinear weights and table lookups."""
    res_all, dense_all = cfg.resolutions(), cfg.dense()
    out = np.zeros((len(x), cfg.output_dim))
    for n, p in enumerate(x):
        for lvl in range(cfg.levels):
            res = int(res_all[lvl])
            pos = p * res
            base = [min(int(math.floor(v)), res - 1) for v in pos]
            frac = [pos[a] - base[a] for a in range(3)]
            acc = np.zeros(cfg.features_per_level)
            for dz in (0, 1):
                for dy in (0, 1):
                    for dx in (0, 1):
                        corner = (base[0] + dx, base[1] + dy, base[2] + dz)
                        w = 1.0
                        for a, d in enumerate((dx, dy, dz)):
                            w *= frac[a] if d else 1.0 - frac[a]
                        acc += w * tables[lvl, table_row(corner, res, dense_all[lvl], cfg.table_size)]
            out[n, lvl * cfg.features_per_level:(lvl + 1) * cfg.features_per_level] = acc
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        HashGridConfig(table_size=1000)
    with pytest.raises(ValueError):
        HashGridConfig(levels=0)
    with pytest.raises(ValueError):
        HashGridConfig(levels=2, growth_factor=1.0)
    cfg = HashGridConfig()
    assert cfg.output_dim == 32
    assert cfg.resolutions()[0] == 16 and cfg.resolutions()[-1] in (511, 512)


def test_matches_loop_oracle_dense_and_hashed(rng):
    cfg = small_config(levels=4, base_resolution=2, growth_factor=2.5, table_size=2 ** 6)
    assert cfg.dense().any() and not cfg.dense().all()
    tables = init_hash_tables(cfg, rng, scale=1.0)
    x = rng.random((50, 3))
    x[0] = [1.0, 1.0, 1.0]
    x[1] = [0.0, 0.0, 0.0]
    got = hash_encode(x, cfg, tables).data
    assert np.abs(got - loop_hash_encode(x, cfg, tables.data)).max() < 1e-12


def test_dense_4cubed_single_level(rng):
    cfg = HashGridConfig(levels=1, features_per_level=3, table_size=2 ** 7, base_resolution=3)
    assert cfg.dense()[0]  # 4^3 vertices fit in 128 rows
    tables = init_hash_tables(cfg, rng, scale=1.0)
    x = rng.random((20, 3))
    assert np.abs(hash_encode(x, cfg, tables).data - loop_hash_encode(x, cfg, tables.data)).max() < 1e-12


def test_corner_and_cell_centre(rng):
    cfg = HashGridConfig(levels=1, features_per_level=2, table_size=2 ** 7, base_resolution=3)
    tables = init_hash_tables(cfg, rng, scale=1.0)
    corner = np.array([[1 / 3, 2 / 3, 0.0]])
    row = table_row((1, 2, 0), 3, True, cfg.table_size)
    np.testing.assert_allclose(hash_encode(corner, cfg, tables).data[0], tables.data[0, row], atol=1e-15)
    centre = np.array([[0.5 / 3, 0.5 / 3, 0.5 / 3]])
    rows = [table_row((dx, dy, dz), 3, True, cfg.table_size) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    np.testing.assert_allclose(hash_encode(centre, cfg, tables).data[0], tables.data[0, rows].mean(axis=0),
                               atol=1e-15)


def test_rejects_points_outside_unit_cube(rng):
    cfg = small_config()
    tables = init_hash_tables(cfg, rng)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        hash_encode(np.array([[0.5, 1.01, 0.2]]), cfg, tables)
    with pytest.raises(ShapeError):
        hash_encode(np.zeros((3, 2)), cfg, tables)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2))
def test_continuity_across_cells(p, axis):
    cfg = small_config(table_size=2 ** 6, growth_factor=2.0)
    tables = init_hash_tables(cfg, np.random.default_rng(1), scale=1.0)
    a = np.array([p])
    b = a.copy()
    b[0, axis] = min(1.0, b[0, axis] + 1e-9) if b[0, axis] < 0.5 else b[0, axis] - 1e-9
    fa, fb = hash_encode(a, cfg, tables).data, hash_encode(b, cfg, tables).data
    assert np.abs(fa - fb).max() < 1e-6


def test_hash_gradient(rng):
    cfg = small_config(table_size=2 ** 5, levels=2, base_resolution=2)
    tables = init_hash_tables(cfg, rng, scale=1.0)
    x = rng.random((6, 3))
    proj = rng.normal(size=(6, cfg.output_dim))
    err = gradcheck(lambda: (hash_encode(x, cfg, tables) * proj).sum(), {"tables": tables}, eps=1e-5)
    assert err["tables"] < 1e-4


# ---------------------------------------------------------- spherical harmonics

def scipy_real_sh(d):
    theta = np.arccos(np.clip(d[:, 2], -1, 1))
    phi = np.arctan2(d[:, 1], d[:, 0])
    out = np.zeros((len(d), SH_BASIS))
    for l in range(8):
        out[:, l * l + l] = sph_harm_y(l, 0, theta, phi).real
        for m in range(1, l + 1):
            y = sph_harm_y(l, m, theta, phi) * (-1) ** m  # remove the Condon-Shortley phase
            out[:, l * l + l + m] = math.sqrt(2) * y.real
            out[:, l * l + l - m] = math.sqrt(2) * y.imag
    return out


def random_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_sh_matches_scipy(rng):
    d = random_dirs(rng, 200)
    np.testing.assert_allclose(sh_encode(d), scipy_real_sh(d), atol=1e-12)


def test_sh_examples(rng):
    d = random_dirs(rng, 10)
    out = sh_encode(d)
    assert out.shape == (10, 64)
    np.testing.assert_allclose(out[:, 0], 1 / (2 * math.sqrt(math.pi)), atol=1e-15)
    pole = sh_encode(np.array([[0.0, 0.0, 1.0]]))[0]
    for l in range(8):
        for m in range(-l, l + 1):
            if m:
                assert abs(pole[l * l + l + m]) < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sh_addition_theorem(seed):
    d = random_dirs(np.random.default_rng(seed), 5)
    out = sh_encode(d)
    for l in range(8):
        s = (out[:, l * l:(l + 1) ** 2] ** 2).sum(axis=1)
        np.testing.assert_allclose(s, (2 * l + 1) / (4 * math.pi), atol=1e-9)


def test_sh_rejects_non_unit():
    with pytest.raises(ValueError, match="unit"):
        sh_encode(np.array([[0.0, 0.0, 2.0]]))


# ---------------------------------------------------------------- hybrid concat

def test_hybrid_concat(rng):
    gx = Tensor(rng.normal(size=(5, 32)))
    gx.data[:, 0] = 7.0
    gd = Tensor(rng.normal(size=(5, 64)))
    trimmed, hybrid = hybrid_concat(gx, gd)
    assert trimmed.shape == (5, 1) and hybrid.shape == (5, 95)
    assert np.all(trimmed.data == 7.0)
    assert np.array_equal(hybrid.data[:, :64], gd.data)
    assert np.array_equal(hybrid.data[:, 64:], gx.data[:, 1:])
    with pytest.raises(ShapeError):
        hybrid_concat(gx, Tensor(np.zeros((4, 64))))
