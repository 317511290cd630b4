import numpy as np
import pytest

from probpnp import geometry as geo
from probpnp.synth import SceneParams, gen_scene


def central_diff(fun, x, h=1e-6):
    """Central differences of a vector function wrt a flat array ``x``; returns (m, n)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def corr_central_diff(fun, corr: geo.CorrespondenceSet, h=1e-5):
    """Central differences of a scalar function of the correspondences wrt x3d, x2d, w2d."""
    out = []
    for name in ("x3d", "x2d", "w2d"):
        arr = getattr(corr, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            a = arr.copy()
            a[idx] += h
            fp = fun(corr.with_arrays(**{name: a}))
            a[idx] -= 2 * h
            fm = fun(corr.with_arrays(**{name: a}))
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    return max(float(np.abs(a - n).max()) / max(float(np.abs(n).max()), 1e-12)
               for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["4dof", "6dof"])
def pose_type(request):
    return request.param


@pytest.fixture
def clean_scene(pose_type):
    return gen_scene(SceneParams(pose_type=pose_type, n_points=16), seed=7)


@pytest.fixture
def noisy_scene(pose_type):
    return gen_scene(SceneParams(pose_type=pose_type, n_points=12, noise_sigma=2.0), seed=11)


@pytest.fixture
def unit_camera():
    return geo.CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
