"""Pose-metric regularization through one differentiable Gauss-Newton step.

The solver output ``y*`` is treated as a constant. A single robust GN increment
``dy = -(J~^T J~ + eps I)^-1 J~^T F~`` is evaluated at ``y*`` and the loss compares
``y* + dy`` with the ground truth. Gradients wrt the correspondences flow only through
``dy``, via ``J~`` and ``F~``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo
from . import robust
from .errors import SingularSystem
from .solver import SolverConfig, gn_step


@dataclass(frozen=True)
class RegLossConfig:
    beta: float = 0.1
    w_pos: float = 1.0
    w_orient: float = 1.0
    ema_momentum: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 < self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class RegLossReport:
    loss: float
    pos_loss: float
    orient_loss: float
    grad_x3D: np.ndarray
    grad_x2D: np.ndarray
    grad_w2D: np.ndarray
    dy: np.ndarray


def smooth_l1(d, beta: float):
    d = np.asarray(d, dtype=float)
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1_grad(d, beta: float):
    d = np.asarray(d, dtype=float)
    return np.where(d < beta, d / beta, 1.0)


def pose_metric(y, y_gt: geo.Pose, cfg: RegLossConfig):
    """Position and orientation losses of a raw pose vector and their gradient wrt it."""
    y = np.asarray(y, dtype=float)
    grad = np.zeros_like(y)
    dt = y[:3] - y_gt.t
    d = float(np.linalg.norm(dt))
    pos = cfg.w_pos * float(smooth_l1(d, cfg.beta))
    if d > 0:
        grad[:3] = cfg.w_pos * float(smooth_l1_grad(d, cfg.beta)) * dt / d
    if y_gt.pose_type == "4dof":
        diff = y[3] - y_gt.theta
        orient = cfg.w_orient * (1.0 - np.cos(diff))
        grad[3] = cfg.w_orient * np.sin(diff)
    else:
        n = float(np.linalg.norm(y[3:]))
        l_hat = y[3:] / n
        dot = float(l_hat @ y_gt.l)
        orient = cfg.w_orient * (2.0 - 2.0 * dot * dot)
        grad[3:] = -4.0 * cfg.w_orient * dot * (y_gt.l - dot * l_hat) / n
    return pos, float(orient), grad


def _directional_vjp(pose_type, y, camera, x3d, w2d, u, alpha, valid):
    """Gradient of ``sum_i alpha_i . (J_i u)`` wrt (x3d, w2d), ``J_i`` the raw weighted Jacobian."""
    R = geo.rotations(pose_type, y[None])[0]
    dR = geo.rotation_partials(pose_type, y[None])[0]
    p = x3d @ R.T + y[:3]
    p = np.where(valid[:, None], p, np.array([0.0, 0.0, 1.0]))
    R_u = np.einsum("k,kab->ab", u[3:], dR)
    q = u[:3] + x3d @ R_u.T
    Pp = geo.projection_jacobian(camera, p)
    alpha = np.where(valid[:, None], alpha, 0.0)
    aw = alpha * w2d
    g_w = alpha * np.einsum("nab,nb->na", Pp, q)
    x, y_, z = p[:, 0], p[:, 1], p[:, 2]
    zero = np.zeros_like(z)
    # derivative of Pp(p) q wrt p at fixed q
    M = np.stack([
        np.stack([-camera.fx * q[:, 2] / z ** 2, zero,
                  camera.fx * (-q[:, 0] / z ** 2 + 2.0 * x * q[:, 2] / z ** 3)], -1),
        np.stack([zero, -camera.fy * q[:, 2] / z ** 2,
                  camera.fy * (-q[:, 1] / z ** 2 + 2.0 * y_ * q[:, 2] / z ** 3)], -1),
    ], -2)
    g_x3 = np.einsum("nab,na->nb", M, aw) @ R + np.einsum("nab,na->nb", Pp, aw) @ R_u
    return g_x3, g_w


def reg_loss(camera, corr: geo.CorrespondenceSet, y_star: geo.Pose, y_gt: geo.Pose,
             cfg: RegLossConfig = RegLossConfig(),
             solver_cfg: Optional[SolverConfig] = None) -> RegLossReport:
    """Pose loss of ``y* + dy`` and its gradient wrt ``(x3d, x2d, w2d)``."""
    solver_cfg = SolverConfig(pose_type=y_star.pose_type) if solver_cfg is None else solver_cfg
    hcfg = solver_cfg.huber
    pt = y_star.pose_type
    y = y_star.vector
    x3d, x2d, w2d = corr.x3d, corr.x2d, corr.w2d
    delta = robust.corr_delta(corr, hcfg)
    f, J, valid = geo.raw_jacobian(pt, y[None], camera, x3d, x2d, w2d, hcfg.z_min)
    f, J, valid = f[0], J[0], valid[0]
    B = geo.tangent_basis(pt, y[None])[0]
    Jt = J @ B
    norm = np.linalg.norm(f, axis=-1)
    s = np.sqrt(robust.huber_slope(norm ** 2, delta))
    linear = valid & (norm > delta)
    Jr, Fr = s[:, None, None] * Jt, s[:, None] * f

    A = np.einsum("nca,ncb->ab", Jr, Jr) + solver_cfg.eps * np.eye(B.shape[1])
    if not np.linalg.cond(A) <= solver_cfg.cond_max:
        raise SingularSystem("Gauss-Newton system is numerically singular")
    dr = -np.linalg.solve(A, np.einsum("nca,nc->a", Jr, Fr))
    dy = B @ dr
    pos, orient, dL_dy = pose_metric(y + dy, y_gt, cfg)

    b = np.linalg.solve(A, B.T @ dL_dy)
    e = Jr @ dr + Fr
    c = Jr @ b
    gamma = (np.einsum("nc,nc->n", e, Jt @ b) + np.einsum("nc,nc->n", c, Jt @ dr)
             + np.einsum("nc,nc->n", c, f))
    gamma = np.where(linear, gamma, 0.0)
    # dL = -sum_i [s_i (e_i.dJ_i b + c_i.dJ_i dr + c_i.df_i) + ds_i gamma_i]
    alpha = -s[:, None] * c + (0.5 * s * gamma / np.where(linear, norm ** 2, 1.0))[:, None] * f
    coef_delta = -0.5 * float((s * gamma).sum()) / delta

    g3a, gwa = _directional_vjp(pt, y, camera, x3d, w2d, B @ b, -s[:, None] * e, valid)
    g3b, gwb = _directional_vjp(pt, y, camera, x3d, w2d, dy, -s[:, None] * c, valid)
    g3f, g2f, gwf = geo.residual_vjp(pt, y[None], camera, x3d, x2d, w2d, alpha[None], hcfg.z_min)
    dd_x2, dd_w = robust.adaptive_delta_grad(x2d, w2d, hcfg)
    return RegLossReport(
        loss=pos + orient, pos_loss=pos, orient_loss=orient,
        grad_x3D=g3a + g3b + g3f[0],
        grad_x2D=g2f[0] + coef_delta * dd_x2,
        grad_w2D=gwa + gwb + gwf[0] + coef_delta * dd_w,
        dy=dy)


def reg_loss_value(camera, corr, y_star: geo.Pose, y_gt: geo.Pose,
                   cfg: RegLossConfig = RegLossConfig(),
                   solver_cfg: Optional[SolverConfig] = None) -> float:
    """Loss value only, through the solver's own GN step (used as a check on :func:`reg_loss`)."""
    solver_cfg = SolverConfig(pose_type=y_star.pose_type) if solver_cfg is None else solver_cfg
    dy = gn_step(y_star, camera, corr, solver_cfg)
    pos, orient, _ = pose_metric(y_star.vector + dy, y_gt, cfg)
    return pos + orient


@dataclass
class DynamicWeightState:
    ema: Optional[float] = None
    steps: int = 0


def weight_statistic(corr: geo.CorrespondenceSet) -> float:
    """``|| sum_i w2D_i ||_1``."""
    return float(np.abs(corr.w2d.sum(axis=0)).sum())


def dynamic_kl_weight(state: DynamicWeightState, corr: geo.CorrespondenceSet,
                      momentum: float = RegLossConfig.ema_momentum) -> float:
    """Update the EMA of the weight statistic in place and return its reciprocal."""
    stat = weight_statistic(corr)
    state.ema = stat if state.ema is None else (1.0 - momentum) * state.ema + momentum * stat
    state.steps += 1
    return 1.0 / state.ema
