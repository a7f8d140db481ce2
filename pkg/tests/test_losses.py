import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwtnerf.losses import (LossWeights, MatchSet, combined_loss, depth_smoothness_loss, distortion_loss,
                            full_geometry_loss, huber, kl_consistency_loss, kl_patch_loss, mse_loss,
                            mv_correspondence_loss, read_matches, write_matches)
from dwtnerf.render import Camera, intrinsics
from dwtnerf.tensor import NonFiniteError, Tensor

from helpers import gradcheck


def loop_distortion(w, m, d):
    total = 0.0
    for r in range(w.shape[0]):
        acc = 0.0
        for i in range(w.shape[1]):
            for j in range(w.shape[1]):
                acc += w[r, i] * w[r, j] * abs(m[r, i] - m[r, j])
            acc += w[r, i] ** 2 * d[r, i] / 3.0
        total += acc
    return total / w.shape[0]


def test_weight_defaults_and_validation():
    w = LossWeights()
    assert w.subbands == {"LL": 0.4, "LH": 0.2, "HL": 0.2, "HH": 0.2}
    s = LossWeights.synthetic_preset()
    assert s.subbands == {"LL": 0.04, "LH": 0.02, "HL": 0.02, "HH": 0.02}
    with pytest.raises(ValueError):
        LossWeights(dist=-1.0)


def test_mse(rng):
    a, b = rng.random((6, 3)), rng.random((6, 3))
    assert mse_loss(a, a).item() == 0.0
    assert abs(mse_loss(a + 0.1, a).item() - 0.01) < 1e-15
    want = sum((a[i, j] - b[i, j]) ** 2 for i in range(6) for j in range(3)) / 18
    assert abs(mse_loss(a, b).item() - want) < 1e-12
    with pytest.raises(ValueError):
        mse_loss(a, b[:5])


def test_distortion_examples():
    assert distortion_loss(np.zeros((2, 4)), np.zeros((2, 4)), np.full((2, 4), 0.25)).item() == 0.0
    assert abs(distortion_loss([[1.0]], [[0.5]], [[0.25]]).item() - 1 / 12) < 1e-15
    with pytest.raises(ValueError):
        distortion_loss([[-0.1]], [[0.5]], [[0.25]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_distortion_matches_double_loop(s, n, seed):
    r = np.random.default_rng(seed)
    w = r.random((n, s)) / s
    d = np.full((n, s), 1.0 / s)
    m = (np.arange(s) + 0.5)[None, :] / s + np.zeros((n, 1))
    assert abs(distortion_loss(w, m, d).item() - loop_distortion(w, m, d)) < 1e-12


def test_full_geometry():
    w = np.array([[0.25, 0.75], [0.5, 0.5]])
    assert full_geometry_loss(w).item() == 0.0
    assert full_geometry_loss(np.zeros((3, 4))).item() == 1.0
    assert abs(full_geometry_loss(np.full((3, 2), 0.25)).item() - 0.25) < 1e-15


def loop_smoothness(d):
    n = d.shape[0]
    h = [(d[i, j + 1] - d[i, j]) ** 2 for i in range(n) for j in range(n - 1)]
    v = [(d[i + 1, j] - d[i, j]) ** 2 for i in range(n - 1) for j in range(n)]
    return sum(h) / len(h) + sum(v) / len(v)


def test_depth_smoothness(rng):
    assert depth_smoothness_loss(np.full((4, 4), 2.0)).item() == 0.0
    ramp = np.tile(np.arange(6) * 0.3, (6, 1))
    assert abs(depth_smoothness_loss(ramp).item() - 0.09) < 1e-15
    d = rng.random((5, 5))
    assert abs(depth_smoothness_loss(d).item() - loop_smoothness(d)) < 1e-12
    assert abs(depth_smoothness_loss(d.ravel(), 5).item() - loop_smoothness(d)) < 1e-12
    with pytest.raises(ValueError, match="patch"):
        depth_smoothness_loss(d.ravel())


def test_kl_examples(rng):
    p = rng.random(6)
    assert abs(kl_consistency_loss(p, p).item()) < 1e-15
    assert abs(kl_consistency_loss([1.0, 0.0], [0.5, 0.5]).item() - math.log(2)) < 1e-6
    assert kl_consistency_loss([0.0, 0.0], [0.0, 0.0]).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_non_negative(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((3, 5)) * (r.random((3, 5)) < 0.8), r.random((3, 5))
    assert kl_consistency_loss(a, b).item() >= -1e-15


def test_kl_patch_pairs_horizontal_neighbours(rng):
    w = rng.random((16, 5))
    grid = w.reshape(4, 4, 5)
    pairs = [kl_consistency_loss(grid[i, j], grid[i, j + 1]).item() for i in range(4) for j in range(3)]
    assert abs(kl_patch_loss(w, 4).item() - np.mean(pairs)) < 1e-14


def test_huber():
    assert huber([[0.0, 0.0]], 1.0).data[0] == 0.0
    assert abs(huber([[0.6, 0.8]], 1.0).data[0] - 0.5) < 1e-15
    assert abs(huber([[2.0]], 1.0).data[0] - 1.5) < 1e-15
    assert abs(huber([[0.0, 3.0]], 2.0).data[0] - 2.0 * (3.0 - 1.0)) < 1e-15
    with pytest.raises(ValueError):
        huber([[1.0]], 0.0)


# ----------------------------------------------------------------- gradients

def test_loss_gradients(rng):
    n, s = 3, 6
    w = Tensor(rng.random((n, s)) / s, requires_grad=True)
    w2 = Tensor(rng.random((n, s)) / s, requires_grad=True)
    m = np.sort(rng.random((n, s)), axis=1)
    d = np.full((n, s), 1.0 / s)
    depth = Tensor(rng.random((4, 4)), requires_grad=True)
    pred = Tensor(rng.random((5, 3)), requires_grad=True)
    gt = rng.random((5, 3))
    res = Tensor(rng.normal(scale=1.5, size=(8, 2)), requires_grad=True)
    patch_w = Tensor(rng.random((16, 4)), requires_grad=True)
    cases = {
        "mse": (lambda: mse_loss(pred, gt), {"pred": pred}),
        "dist": (lambda: distortion_loss(w, m, d), {"w": w}),
        "fg": (lambda: full_geometry_loss(w), {"w": w}),
        "ds": (lambda: depth_smoothness_loss(depth), {"depth": depth}),
        "kl": (lambda: kl_consistency_loss(w, w2), {"w": w, "w2": w2}),
        "kl_patch": (lambda: kl_patch_loss(patch_w, 4), {"w": patch_w}),
        "huber": (lambda: huber(res, 1.0).sum(), {"res": res}),
    }
    for name, (fn, params) in cases.items():
        err = gradcheck(fn, params, eps=1e-5)
        assert max(err.values()) < 1e-4, (name, err)


# ------------------------------------------------------------------ matches

def pinhole(pose_t, f=20.0, side=32):
    pose = np.eye(4)
    pose[:3, 3] = pose_t
    return Camera(intrinsics(f, (side - 1) / 2, (side - 1) / 2), pose, side, side)


def plane_depth_fn(cameras, plane_z):
    """Exact ray distance from each camera to the world plane z = plane_z."""
    def fn(view, px_uv):
        cam = cameras[view]
        px = np.asarray(px_uv, dtype=float)
        x = (px[:, 0] - cam.K[0, 2]) / cam.K[0, 0]
        y = (px[:, 1] - cam.K[1, 2]) / cam.K[1, 1]
        z = cam.center[2] - plane_z  # cameras look down -z
        return Tensor(z * np.sqrt(x * x + y * y + 1.0))
    return fn


def plane_match(ci, cj, xi, plane_z):
    """Independent oracle: back-project to the plane in world space, then project into view j."""
    x = (xi[:, 0] - ci.K[0, 2]) / ci.K[0, 0]
    y = (xi[:, 1] - ci.K[1, 2]) / ci.K[1, 1]
    z = ci.center[2] - plane_z
    world = ci.center + np.stack([x * z, -y * z, -np.full_like(x, z)], axis=1)
    rel = world - cj.center
    zz = -rel[:, 2]
    return np.stack([cj.K[0, 0] * rel[:, 0] / zz + cj.K[0, 2], cj.K[1, 1] * -rel[:, 1] / zz + cj.K[1, 2]], axis=1)


def test_mv_identity_pose_is_zero(rng):
    cams = [pinhole([0, 0, 3.0]), pinhole([0, 0, 3.0])]
    xi = rng.uniform(2, 29, size=(10, 2))
    ms = MatchSet(0, 1, xi, xi, np.ones(10))
    assert mv_correspondence_loss(ms, plane_depth_fn(cams, 0.0), cams, 1.0).item() < 1e-20


def test_mv_plane_matches_are_exact_and_two_way_is_mean(rng):
    cams = [pinhole([0, 0, 3.0]), pinhole([0.3, -0.2, 2.5])]
    xi = rng.uniform(8, 23, size=(12, 2))
    xj = plane_match(cams[0], cams[1], xi, 0.0)
    assert np.all((xj >= 0) & (xj <= 31))
    depth = plane_depth_fn(cams, 0.0)
    ms = MatchSet(0, 1, xi, xj, np.ones(12))
    assert mv_correspondence_loss(ms, depth, cams, 1.0, two_way=True).item() < 1e-18
    # perturb the matches: two-way equals the mean of the two directions
    noisy = MatchSet(0, 1, xi, xj + rng.normal(scale=2.0, size=xj.shape), rng.uniform(0.5, 1, 12))
    fwd = mv_correspondence_loss(noisy, depth, cams, 1.0, two_way=False).item()
    rev = MatchSet(1, 0, noisy.xj, noisy.xi, noisy.confidence)
    bwd = mv_correspondence_loss(rev, depth, cams, 1.0, two_way=False).item()
    both = mv_correspondence_loss(noisy, depth, cams, 1.0, two_way=True).item()
    assert abs(both - 0.5 * (fwd + bwd)) < 1e-12
    assert abs(mv_correspondence_loss(noisy, depth, cams, 0.1, two_way=True).item() - 0.1 * both) < 1e-12


def test_mv_gradient_through_depth(rng):
    cams = [pinhole([0, 0, 3.0]), pinhole([0.3, -0.2, 2.5])]
    xi = rng.uniform(8, 23, size=(6, 2))
    xj = plane_match(cams[0], cams[1], xi, 0.0) + rng.normal(scale=0.7, size=(6, 2))
    exact = plane_depth_fn(cams, 0.0)
    scale = {v: Tensor(1.0 + 0.05 * rng.normal(size=6), requires_grad=True) for v in (0, 1)}

    def depth(view, px):
        return exact(view, px) * scale[view]

    ms = MatchSet(0, 1, xi, xj, np.ones(6))
    err = gradcheck(lambda: mv_correspondence_loss(ms, depth, cams, 1.0), {"s0": scale[0], "s1": scale[1]},
                    eps=1e-6)
    assert max(err.values()) < 1e-4


def test_mv_confidence_filter_warns():
    cams = [pinhole([0, 0, 3.0]), pinhole([0, 0, 3.0])]
    ms = MatchSet(0, 1, [[1, 1]], [[1, 1]], [0.2])
    with pytest.warns(RuntimeWarning, match="confidence"):
        assert mv_correspondence_loss(ms, plane_depth_fn(cams, 0.0), cams).item() == 0.0


def test_match_set_validation_and_file_round_trip(tmp_path, rng):
    with pytest.raises(ValueError):
        MatchSet(0, 1, [[0, 0]], [[0, 0], [1, 1]], [1.0])
    with pytest.raises(ValueError):
        MatchSet(0, 1, [[0, 0]], [[0, 0]], [1.5])
    ms = MatchSet(0, 1, [[40.0, 2.0]], [[1, 1]], [1.0])
    with pytest.raises(ValueError, match="outside"):
        ms.check_bounds((32, 32), (32, 32))
    sets = [MatchSet(0, 1, rng.random((4, 2)) * 30, rng.random((4, 2)) * 30, rng.random(4)),
            MatchSet(2, 0, rng.random((2, 2)) * 30, rng.random((2, 2)) * 30, rng.random(2))]
    path = tmp_path / "m.txt"
    write_matches(path, sets)
    back = read_matches(path)
    for a, b in zip(sets, back):
        assert (a.view_i, a.view_j) == (b.view_i, b.view_j)
        assert np.array_equal(a.xi, b.xi) and np.array_equal(a.xj, b.xj)
        assert np.array_equal(a.confidence, b.confidence)
    path.write_text("0 1 1 2 3\n")
    with pytest.raises(ValueError, match=":1:"):
        read_matches(path)


# ----------------------------------------------------------------- combined

def test_combined_loss(rng):
    mse = Tensor(0.3)
    terms = {"mse": mse, "dw": Tensor(0.2), "dist": Tensor(0.5), "fg": Tensor(0.7), "ds": Tensor(1.1),
             "kl": Tensor(0.9), "mv": Tensor(0.05)}
    zero = LossWeights(ll=0, lh=0, hl=0, hh=0, dist=0, fg=0, ds=0, kl=0, mv=0)
    assert combined_loss({"mse": mse, "dist": Tensor(0.5)}, zero).item() == 0.3
    one = LossWeights(dist=0.1, fg=0, ds=0, kl=0)
    assert combined_loss({"mse": mse, "dist": Tensor(0.5), "fg": Tensor(0.7)}, one).item() == 0.3 + 0.1 * 0.5
    w = LossWeights(dist=0.01, fg=0.02, ds=0.03, kl=0.04)
    want = 0.3 + 0.2 + 0.05 + 0.01 * 0.5 + 0.02 * 0.7 + 0.03 * 1.1 + 0.04 * 0.9
    assert abs(combined_loss(terms, w).item() - want) < 1e-12
    with pytest.raises(KeyError):
        combined_loss({"mse": mse, "lpips": Tensor(1.0)}, w)
    with pytest.raises(ValueError):
        combined_loss({"dw": Tensor(1.0)}, w)


def test_combined_rejects_non_finite_term_by_name():
    bad = Tensor(0.0)
    bad.data = np.array(np.inf)
    with pytest.raises(NonFiniteError, match="'fg'"):
        combined_loss({"mse": Tensor(0.1), "fg": bad}, LossWeights())


@pytest.mark.parametrize("loss", ["mse", "dist", "fg", "ds", "kl"])
def test_losses_non_negative_and_zero_on_fit(loss, rng):
    w = rng.random((3, 5)) / 5
    exact = {"mse": lambda: mse_loss(w, w), "dist": lambda: distortion_loss(np.zeros((3, 5)), w, w + 0.1),
             "fg": lambda: full_geometry_loss(w / w.sum(1, keepdims=True)),
             "ds": lambda: depth_smoothness_loss(np.ones((3, 3))), "kl": lambda: kl_consistency_loss(w, w)}
    rand = {"mse": lambda: mse_loss(w, rng.random((3, 5))), "dist": lambda: distortion_loss(w, w, w + 0.1),
            "fg": lambda: full_geometry_loss(w), "ds": lambda: depth_smoothness_loss(rng.random((3, 3))),
            "kl": lambda: kl_consistency_loss(w, rng.random((3, 5)))}
    assert abs(exact[loss]().item()) < 1e-15
    assert rand[loss]().item() >= 0
