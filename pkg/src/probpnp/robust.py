"""Huber kernel with adaptive threshold, robust rescaling, and the robust PnP energy.

The energy of a pose is ``E(y) = 1/2 sum_i rho(||f_i(y)||^2)`` where ``f_i`` is the
weighted reprojection residual. Points at non-positive depth add a fixed penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo

DEPTH_PENALTY = 1e6


@dataclass(frozen=True)
class HuberConfig:
    delta_rel: float = 1.0
    delta_min: float = 1e-2
    depth_penalty: float = DEPTH_PENALTY
    z_min: float = geo.Z_MIN

    def __post_init__(self):
        if not (self.delta_rel > 0 and self.delta_min > 0):
            raise ValueError("delta_rel and delta_min must be positive")


def huber(s, delta):
    """Huber kernel on a squared residual: ``s`` below ``delta**2``, linear in sqrt(s) above."""
    s = np.asarray(s, dtype=float)
    root = np.sqrt(np.maximum(s, 0.0))
    out = np.where(s <= delta * delta, s, delta * (2.0 * root - delta))
    return float(out) if out.ndim == 0 else out


def huber_slope(s, delta):
    """d rho / d s, which is also the rescaling factor rho' of the robust LM step."""
    s = np.asarray(s, dtype=float)
    root = np.sqrt(np.maximum(s, 0.0))
    return np.where(s <= delta * delta, 1.0, delta / np.where(root > 0, root, 1.0))


def _delta_terms(x2d, w2d):
    x2d = np.asarray(x2d, dtype=float)
    w2d = np.asarray(w2d, dtype=float)
    n = x2d.shape[-2]
    wbar_l1 = np.abs(w2d.mean(axis=-2)).sum(axis=-1)
    centered = x2d - x2d.mean(axis=-2, keepdims=True)
    # a single point has no spread; delta then falls back to delta_min
    spread = np.sqrt((centered ** 2).sum(axis=(-2, -1)) / max(n - 1, 1))
    return n, wbar_l1, centered, spread


def adaptive_delta(x2d, w2d, cfg: HuberConfig):
    """Adaptive Huber threshold from the mean weight and 2D point spread.

    Accepts a single set (N, 2) or a batch of sets (M, n, 2).
    """
    _, wbar_l1, _, spread = _delta_terms(x2d, w2d)
    delta = np.maximum(cfg.delta_min, cfg.delta_rel * 0.5 * wbar_l1 * spread)
    return float(delta) if np.ndim(delta) == 0 else delta


def adaptive_delta_grad(x2d, w2d, cfg: HuberConfig):
    """Gradient of :func:`adaptive_delta` wrt ``(x2d, w2d)`` for a single set."""
    n, wbar_l1, centered, spread = _delta_terms(x2d, w2d)
    raw = cfg.delta_rel * 0.5 * wbar_l1 * spread
    if raw <= cfg.delta_min or spread == 0.0:
        return np.zeros_like(centered), np.zeros(np.shape(w2d))
    d_x2d = cfg.delta_rel * 0.5 * wbar_l1 * centered / ((n - 1) * spread)
    d_w2d = np.full(np.shape(w2d), cfg.delta_rel * 0.5 * spread / n) * np.sign(np.mean(w2d, axis=0))
    return d_x2d, d_w2d


def corr_delta(corr: geo.CorrespondenceSet, cfg: HuberConfig) -> float:
    return adaptive_delta(corr.x2d, corr.w2d, cfg)


def rescale(f_i, J_i, delta):
    """Robust rescaling of one residual block: returns ``(f_tilde, J_tilde, rho_prime)``."""
    f_i = np.asarray(f_i, dtype=float)
    norm = float(np.linalg.norm(f_i))
    rho_prime = 1.0 if norm <= delta else delta / norm
    k = np.sqrt(rho_prime)
    return k * f_i, k * np.asarray(J_i, dtype=float), rho_prime


def energies(pose_type, Y, camera, x3d, x2d, w2d, delta, cfg: HuberConfig):
    """Robust energy for a batch of poses, shape (K,).

    ``delta`` may be a scalar or (K,) when each pose has its own correspondence subset.
    """
    _, _, f, valid = geo.forward(pose_type, Y, camera, x3d, x2d, w2d, cfg.z_min)
    s = (f ** 2).sum(-1)
    d = np.asarray(delta, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    rho = np.where(valid, huber(s, d), 0.0)
    return 0.5 * rho.sum(-1) + cfg.depth_penalty * (~valid).sum(-1)


def pose_energies(pose_type, Y, camera, corr: geo.CorrespondenceSet, cfg: HuberConfig):
    delta = corr_delta(corr, cfg)
    return energies(pose_type, np.atleast_2d(Y), camera, corr.x3d, corr.x2d, corr.w2d, delta, cfg)


def robust_cost(pose: geo.Pose, camera, corr: geo.CorrespondenceSet, cfg: HuberConfig) -> float:
    """``E(y) = 1/2 sum_i rho(||f_i||^2)`` with the adaptive threshold."""
    return float(pose_energies(pose.pose_type, pose.vector[None], camera, corr, cfg)[0])


def energy_grads(pose_type, Y, camera, corr: geo.CorrespondenceSet, cfg: HuberConfig,
                 sample_weights=None):
    """Gradient of E(y) wrt ``(x3d, x2d, w2d)`` at each pose in ``Y``.

    The dependence of the adaptive threshold on ``x2d`` and ``w2d`` is included.
    Without ``sample_weights`` the per-pose gradients are returned with a leading K axis;
    otherwise their weighted sum is returned.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    delta = corr_delta(corr, cfg)
    _, _, f, valid = geo.forward(pose_type, Y, camera, corr.x3d, corr.x2d, corr.w2d, cfg.z_min)
    norm = np.sqrt((f ** 2).sum(-1))
    linear = valid & (norm > delta)
    slope = np.where(linear, delta / np.where(norm > 0, norm, 1.0), 1.0)
    a = slope[..., None] * f
    g3, g2, gw = geo.residual_vjp(pose_type, Y, camera, corr.x3d, corr.x2d, corr.w2d, a, cfg.z_min)
    dE_ddelta = np.where(linear, norm - delta, 0.0).sum(-1)
    dd_x2, dd_w = adaptive_delta_grad(corr.x2d, corr.w2d, cfg)
    g2 = g2 + dE_ddelta[:, None, None] * dd_x2
    gw = gw + dE_ddelta[:, None, None] * dd_w
    if sample_weights is None:
        return g3, g2, gw
    v = np.asarray(sample_weights, dtype=float)
    return (np.einsum("k,kna->na", v, g3), np.einsum("k,kna->na", v, g2),
            np.einsum("k,kna->na", v, gw))
