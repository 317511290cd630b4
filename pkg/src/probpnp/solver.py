"""Robust Levenberg-Marquardt PnP solver.

All iterations are computed in the orthonormal tangent basis of the pose (see
:func:`probpnp.geometry.tangent_basis`); returned increments are mapped back to the raw
pose vector. Batched routines solve many small problems at once and are used for the
random-subset hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geometry as geo
from . import robust
from .errors import NoValidHypothesis, SingularSystem
from .robust import HuberConfig

DEFAULT_SUBSET = {"4dof": 4, "6dof": 6}


@dataclass(frozen=True)
class SolverConfig:
    pose_type: str = "6dof"
    max_iter: int = 10
    eps: float = 1e-5
    lm_lambda_init: float = 1e-2
    lambda_up: float = 2.0
    lambda_down: float = 1.0 / 3.0
    n_hypotheses: int = 64
    subset_size: Optional[int] = None
    subset_iters: int = 3
    cost_tol: float = 1e-12
    step_tol: float = 1e-8
    cond_max: float = 1e12
    start_depth: float = 2.0
    huber: HuberConfig = field(default_factory=HuberConfig)

    def __post_init__(self):
        if self.pose_type not in geo.POSE_TYPES:
            raise ValueError(f"pose_type must be one of {geo.POSE_TYPES}")
        for name in ("max_iter", "eps", "lm_lambda_init", "lambda_up", "lambda_down",
                     "n_hypotheses", "subset_iters", "cost_tol", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_subset(self) -> int:
        return self.subset_size if self.subset_size is not None else DEFAULT_SUBSET[self.pose_type]


@dataclass(frozen=True, eq=False)
class PnPSolution:
    pose: geo.Pose
    cov: np.ndarray
    cost: float
    log_likelihood: float
    converged: bool
    iterations: int
    cost_history: tuple = ()

    @property
    def pose_type(self) -> str:
        return self.pose.pose_type


# ---------------------------------------------------------------------------
# Normal equations


def normal_equations(pose_type, Y, camera, x3d, x2d, w2d, delta, hcfg: HuberConfig):
    """Robustified Gauss-Newton system in tangent coordinates.

    Returns ``(A, g, Jr, Fr)`` with ``A = J~^T J~`` (K, dt, dt), ``g = J~^T F~`` (K, dt) and the
    rescaled Jacobian / residual blocks (K, N, 2, dt), (K, N, 2).
    """
    f, J, valid = geo.tangent_jacobian(pose_type, Y, camera, x3d, x2d, w2d, hcfg.z_min)
    d = np.asarray(delta, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    s = (f ** 2).sum(-1)
    k = np.sqrt(robust.huber_slope(s, d))
    Fr = k[..., None] * f
    Jr = k[..., None, None] * J
    A = np.einsum("knca,kncb->kab", Jr, Jr)
    g = np.einsum("knca,knc->ka", Jr, Fr)
    return A, g, Jr, Fr


def _damped_solve(M, g, cond_max):
    """Solve ``M x = -g`` batched; returns (x, ok) where ok flags well-conditioned systems."""
    cond = np.linalg.cond(M)
    ok = np.isfinite(cond) & (cond <= cond_max)
    x = np.zeros_like(g)
    if ok.any():
        x[ok] = -np.linalg.solve(M[ok], g[ok][..., None])[..., 0]
    return x, ok


def _lm_damping(A, lam):
    D2 = np.clip(np.diagonal(A, axis1=-2, axis2=-1), 1e-6, 1e32)
    return A + lam[:, None, None] * (D2[:, :, None] * np.eye(A.shape[-1]))


def _run_lm(pose_type, Y, camera, x3d, x2d, w2d, delta, cfg: SolverConfig, n_iter, raise_singular):
    """Batched LM iterations. Returns ``(Y, cost, converged, iterations, history, ok)``."""
    hcfg = cfg.huber
    Y = np.array(Y, dtype=float)
    K = len(Y)
    lam = np.full(K, cfg.lm_lambda_init)
    cost = robust.energies(pose_type, Y, camera, x3d, x2d, w2d, delta, hcfg)
    history = [cost.copy()]
    active = np.ones(K, dtype=bool)
    converged = cost <= cfg.cost_tol
    active &= ~converged
    ok = np.ones(K, dtype=bool)
    iterations = np.zeros(K, dtype=int)
    A = g = None
    stale = np.ones(K, dtype=bool)
    for _ in range(n_iter):
        if not active.any():
            break
        if A is None:
            A, g, _, _ = normal_equations(pose_type, Y, camera, x3d, x2d, w2d, delta, hcfg)
        elif stale.any():
            sub = stale
            A_s, g_s, _, _ = normal_equations(
                pose_type, Y[sub], camera, _take(x3d, sub), _take(x2d, sub), _take(w2d, sub),
                _take_delta(delta, sub), hcfg)
            A[sub], g[sub] = A_s, g_s
        stale[:] = False
        M = _lm_damping(A, lam)
        step, good = _damped_solve(M, g, cfg.cond_max)
        bad = active & ~good
        if bad.any():
            if raise_singular:
                raise SingularSystem("damped normal equations are numerically singular")
            ok &= ~bad
            active &= ~bad
        Yn = geo.retract(pose_type, Y, step)
        cn = robust.energies(pose_type, Yn, camera, x3d, x2d, w2d, delta, hcfg)
        accept = active & (cn < cost)
        Y[accept] = Yn[accept]
        cost = np.where(accept, cn, cost)
        stale |= accept
        lam = np.where(accept, lam * cfg.lambda_down, np.where(active, lam * cfg.lambda_up, lam))
        iterations += active
        small = np.linalg.norm(step, axis=-1) < cfg.step_tol
        done = active & (small | (cost <= cfg.cost_tol))
        converged |= done
        active &= ~done
        history.append(cost.copy())
    return Y, cost, converged, iterations, np.array(history), ok


def _take(arr, mask):
    arr = np.asarray(arr)
    return arr[mask] if arr.ndim == 3 else arr


def _take_delta(delta, mask):
    d = np.asarray(delta)
    return d[mask] if d.ndim == 1 else d


# ---------------------------------------------------------------------------
# Public single-problem operations


def _system(pose: geo.Pose, camera, corr, hcfg):
    delta = robust.corr_delta(corr, hcfg)
    A, g, _, _ = normal_equations(pose.pose_type, pose.vector[None], camera, corr.x3d, corr.x2d,
                                  corr.w2d, delta, hcfg)
    return A[0], g[0]


def lm_step(pose: geo.Pose, camera, corr, cfg: SolverConfig, lam: float):
    """One robustified LM increment ``-(J~^T J~ + lam D^2)^-1 J~^T F~``.

    Returns ``(dy, predicted_cost_reduction)`` with ``dy`` in raw pose-vector coordinates.
    """
    A, g = _system(pose, camera, corr, cfg.huber)
    step, ok = _damped_solve(_lm_damping(A[None], np.array([lam])), g[None], cfg.cond_max)
    if not ok[0]:
        raise SingularSystem("damped normal equations are numerically singular")
    step = step[0]
    predicted = -(g @ step + 0.5 * step @ A @ step)
    B = geo.tangent_basis(pose.pose_type, pose.vector[None])[0]
    return B @ step, float(predicted)


def gn_step(pose: geo.Pose, camera, corr, cfg: SolverConfig, eps: Optional[float] = None):
    """Gauss-Newton increment ``-(J~^T J~ + eps I)^-1 J~^T F~`` in raw pose-vector coordinates."""
    eps = cfg.eps if eps is None else eps
    A, g = _system(pose, camera, corr, cfg.huber)
    M = A + eps * np.eye(len(A))
    step, ok = _damped_solve(M[None], g[None], cfg.cond_max)
    if not ok[0]:
        raise SingularSystem("Gauss-Newton system is numerically singular")
    B = geo.tangent_basis(pose.pose_type, pose.vector[None])[0]
    return B @ step[0]


def apply_step(pose: geo.Pose, dy) -> geo.Pose:
    return geo.pose_from_vector(pose.pose_type, pose.vector + np.asarray(dy))


def covariance(pose: geo.Pose, camera, corr, cfg: SolverConfig) -> np.ndarray:
    """Pose covariance ``(J~^T J~ + eps I)^-1`` mapped to raw coordinates.

    For quaternions the result is 7x7 with the radial direction projected out (rank 6).
    """
    A, _ = _system(pose, camera, corr, cfg.huber)
    M = A + cfg.eps * np.eye(len(A))
    if not np.linalg.cond(M) <= cfg.cond_max:
        raise SingularSystem("covariance system is numerically singular")
    B = geo.tangent_basis(pose.pose_type, pose.vector[None])[0]
    cov = B @ np.linalg.inv(M) @ B.T
    return 0.5 * (cov + cov.T)


def log_likelihood(pose: geo.Pose, camera, corr, cfg: SolverConfig) -> float:
    return -robust.robust_cost(pose, camera, corr, cfg.huber)


def canonical_start(pose_type: str, depth: float = 2.0) -> np.ndarray:
    if pose_type == "4dof":
        return np.array([0.0, 0.0, depth, 0.0])
    return np.array([0.0, 0.0, depth, 1.0, 0.0, 0.0, 0.0])


def start_poses(pose_type: str, m: int, rng: np.random.Generator, depth: float = 2.0) -> np.ndarray:
    """Subset starts: canonical translation, orientation drawn uniformly per hypothesis."""
    Y = np.tile(canonical_start(pose_type, depth), (m, 1))
    if pose_type == "4dof":
        Y[:, 3] = rng.uniform(-np.pi, np.pi, m)
    else:
        Y[:, 3:] = geo.canonical_quaternion(rng.normal(size=(m, 4)))
    return Y


def sample_subsets(weights_l1, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` index subsets of size ``n`` without replacement, p(i) proportional to weights.

    Uses the Gumbel top-k construction, which has the same law as drawing indices one by
    one from the renormalized multinomial.
    """
    logp = np.log(np.asarray(weights_l1, dtype=float))
    keys = logp + rng.gumbel(size=(m, len(logp)))
    return np.argsort(-keys, axis=1, kind="stable")[:, :n]


def hypotheses(camera, corr: geo.CorrespondenceSet, cfg: SolverConfig, rng: np.random.Generator):
    """All subset hypotheses: returns ``(Y, loglik, valid, subsets)``."""
    N, n = corr.n, cfg.n_subset
    if not (3 <= n < N):
        raise ValueError(f"subset size must satisfy 3 <= n < N (n={n}, N={N})")
    idx = sample_subsets(np.abs(corr.w2d).sum(1), n, cfg.n_hypotheses, rng)
    x3, x2, w = corr.x3d[idx], corr.x2d[idx], corr.w2d[idx]
    delta = robust.adaptive_delta(x2, w, cfg.huber)
    Y0 = start_poses(cfg.pose_type, len(idx), rng, cfg.start_depth)
    Y, _, _, _, _, ok = _run_lm(cfg.pose_type, Y0, camera, x3, x2, w, delta, cfg,
                                cfg.subset_iters, raise_singular=False)
    full_delta = robust.corr_delta(corr, cfg.huber)
    E = robust.energies(cfg.pose_type, Y, camera, corr.x3d, corr.x2d, corr.w2d, full_delta, cfg.huber)
    p = geo.transform_points(cfg.pose_type, Y, corr.x3d)
    valid = ok & np.all(p[..., 2] > cfg.huber.z_min, axis=-1) & np.isfinite(E)
    return Y, -E, valid, idx


def init_hypotheses(camera, corr, cfg: SolverConfig, rng: np.random.Generator) -> geo.Pose:
    """Best weighted-random-subset hypothesis by full-set log-likelihood (ties: first drawn)."""
    Y, ll, valid, _ = hypotheses(camera, corr, cfg, rng)
    if not valid.any():
        raise NoValidHypothesis("every hypothesis places points behind the camera")
    best = int(np.argmax(np.where(valid, ll, -np.inf)))
    return geo.pose_from_vector(cfg.pose_type, Y[best])


def init_with_gt(camera, corr, cfg: SolverConfig, rng: np.random.Generator, y_gt: geo.Pose) -> geo.Pose:
    """Training-mode start: the hypothesis unless the ground truth is strictly more likely."""
    hyp = init_hypotheses(camera, corr, cfg, rng)
    if log_likelihood(y_gt, camera, corr, cfg) > log_likelihood(hyp, camera, corr, cfg):
        return y_gt
    return hyp


def solve(camera, corr: geo.CorrespondenceSet, cfg: SolverConfig = SolverConfig(),
          init: Optional[geo.Pose] = None, rng: Optional[np.random.Generator] = None) -> PnPSolution:
    """Robust LM PnP from ``init`` (or from the random-subset hypotheses when omitted)."""
    if init is None:
        rng = np.random.default_rng(0) if rng is None else rng
        init = init_hypotheses(camera, corr, cfg, rng)
    elif init.pose_type != cfg.pose_type:
        cfg = replace(cfg, pose_type=init.pose_type)
    delta = robust.corr_delta(corr, cfg.huber)
    Y, cost, converged, iterations, history, _ = _run_lm(
        cfg.pose_type, init.vector[None], camera, corr.x3d, corr.x2d, corr.w2d, delta, cfg,
        cfg.max_iter, raise_singular=True)
    pose = geo.pose_from_vector(cfg.pose_type, Y[0])
    cov = covariance(pose, camera, corr, cfg)
    c = float(cost[0])
    return PnPSolution(pose=pose, cov=cov, cost=c, log_likelihood=-c, converged=bool(converged[0]),
                       iterations=int(iterations[0]), cost_history=tuple(history[:, 0].tolist()))
