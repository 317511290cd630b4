"""Proposal distributions for Monte Carlo pose sampling.

Position uses a 3D multivariate t; yaw uses a von Mises / uniform mixture; quaternion
orientation uses the angular central Gaussian (ACG) on the unit 3-sphere. Each family
supports log-density evaluation, sampling, and re-estimation from weighted samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln, i0e

from . import geometry as geo
from .errors import DegenerateFit, FixedPointDivergence

NU = 3.0
UNIFORM_WEIGHT = 0.25
ACG_DISPERSION = 1e-3
KAPPA_MAX = 1e6
LOG_S4 = np.log(2.0 * np.pi ** 2)


def _normalized_weights(weights, n):
    v = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    total = v.sum()
    if not (np.all(v >= 0) and np.isfinite(total) and total > 0):
        raise DegenerateFit("weights must be nonnegative with a positive finite sum")
    return v / total


# ---------------------------------------------------------------------------
# Multivariate t


@dataclass(frozen=True, eq=False)
class MvT3:
    mu: np.ndarray
    Sigma: np.ndarray
    nu: float = NU

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(3)
        S = np.array(self.Sigma, dtype=float).reshape(3, 3)
        S = 0.5 * (S + S.T)
        try:
            chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFit("scale matrix is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "_chol", chol)

    def log_pdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        z = np.linalg.solve(self._chol, (t - self.mu).reshape(-1, 3).T).T
        maha = (z ** 2).sum(-1)
        nu = self.nu
        logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        out = (gammaln(0.5 * (nu + 3)) - gammaln(0.5 * nu) - 1.5 * np.log(nu * np.pi) - 0.5 * logdet
               - 0.5 * (nu + 3) * np.log1p(maha / nu))
        return out.reshape(t.shape[:-1])

    def pdf(self, t):
        return np.exp(self.log_pdf(t))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, 3)) @ self._chol.T
        g = rng.chisquare(self.nu, n) / self.nu
        return self.mu + z / np.sqrt(g)[:, None]

    @classmethod
    def fit(cls, t, weights=None, nu: float = NU) -> "MvT3":
        """Weighted mean and covariance of the samples, ridge-regularized by 1e-9 trace/3."""
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        if len(t) < 4:
            raise DegenerateFit("need at least 4 samples")
        v = _normalized_weights(weights, len(t))
        mu = v @ t
        c = t - mu
        S = (v[:, None] * c).T @ c
        tr = np.trace(S)
        if not (np.isfinite(tr) and tr > 0):
            raise DegenerateFit("weighted covariance has zero spread")
        return cls(mu, S + 1e-9 * tr / 3.0 * np.eye(3), nu)


def mvt_density(d: MvT3, t):
    return d.pdf(t)


def mvt_sample(d: MvT3, rng, n=1):
    return d.sample(rng, n)


def mvt_fit(t, weights=None, nu=NU) -> MvT3:
    return MvT3.fit(t, weights, nu)


# ---------------------------------------------------------------------------
# Von Mises + uniform mixture


@dataclass(frozen=True)
class VonMisesUniformMix:
    mu: float
    kappa: float
    alpha: float = UNIFORM_WEIGHT

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if not self.kappa >= 0:
            raise ValueError("kappa must be nonnegative")
        object.__setattr__(self, "mu", geo.wrap_angle(float(self.mu)))
        object.__setattr__(self, "kappa", float(min(self.kappa, KAPPA_MAX)))

    def log_pdf(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        k = self.kappa
        log_vm = k * (np.cos(theta - self.mu) - 1.0) - np.log(2.0 * np.pi * i0e(k))
        log_u = -np.log(2.0 * np.pi)
        if self.alpha == 0.0:
            return log_vm
        if self.alpha == 1.0:
            return np.full(theta.shape, log_u)
        return np.logaddexp(np.log1p(-self.alpha) + log_vm, np.log(self.alpha) + log_u)

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        uniform = rng.random(n) < self.alpha
        vm = rng.vonmises(self.mu, self.kappa, n)
        out = np.where(uniform, rng.uniform(-np.pi, np.pi, n), vm)
        return geo.wrap_angle(out)

    @classmethod
    def fit(cls, theta, weights=None, alpha: float = UNIFORM_WEIGHT) -> "VonMisesUniformMix":
        """Weighted circular mean and approximate concentration, scaled down by 3."""
        theta = np.asarray(theta, dtype=float).ravel()
        v = _normalized_weights(weights, len(theta))
        s, c = v @ np.sin(theta), v @ np.cos(theta)
        rbar = float(np.hypot(s, c))
        mu = float(np.arctan2(s, c))
        if rbar >= 1.0 - 1e-9:
            return cls(mu, KAPPA_MAX, alpha)
        kappa_hat = rbar * (2.0 - rbar ** 2) / (1.0 - rbar ** 2)
        return cls(mu, kappa_hat / 3.0, alpha)

    @classmethod
    def from_variance(cls, theta, var, alpha: float = UNIFORM_WEIGHT) -> "VonMisesUniformMix":
        if not var > 0:
            raise DegenerateFit("yaw variance must be positive")
        return cls(theta, 1.0 / (3.0 * var), alpha)


def vm_density(d: VonMisesUniformMix, theta):
    return d.pdf(theta)


def vm_sample(d: VonMisesUniformMix, rng, n=1):
    return d.sample(rng, n)


def vm_fit(theta, weights=None, alpha=UNIFORM_WEIGHT) -> VonMisesUniformMix:
    return VonMisesUniformMix.fit(theta, weights, alpha)


# ---------------------------------------------------------------------------
# Angular central Gaussian on S^3


def _dispersion_floor(L, alpha):
    sign, logdet = np.linalg.slogdet(L)
    if sign <= 0:
        raise DegenerateFit("ACG matrix is not positive definite")
    return L + alpha * np.exp(0.25 * logdet) * np.eye(4)


@dataclass(frozen=True, eq=False)
class Acg4:
    Lambda: np.ndarray

    def __post_init__(self):
        L = np.array(self.Lambda, dtype=float).reshape(4, 4)
        L = 0.5 * (L + L.T)
        tr = np.trace(L)
        if not (np.isfinite(tr) and tr > 0):
            raise DegenerateFit("ACG matrix must have positive trace")
        L = L * (4.0 / tr)
        try:
            chol = np.linalg.cholesky(L)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFit("ACG matrix is not positive definite") from exc
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "_chol", chol)

    def log_pdf(self, l) -> np.ndarray:
        l = np.asarray(l, dtype=float)
        z = np.linalg.solve(self._chol, l.reshape(-1, 4).T).T
        quad = (z ** 2).sum(-1)
        logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        return (-2.0 * np.log(quad) - LOG_S4 - 0.5 * logdet).reshape(l.shape[:-1])

    def pdf(self, l):
        return np.exp(self.log_pdf(l))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.standard_normal((n, 4)) @ self._chol.T
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    @classmethod
    def from_inverse_covariance(cls, info, alpha: float = ACG_DISPERSION) -> "Acg4":
        """``Lambda = L^ + alpha |L^|^(1/4) I`` with ``L^ = (info + I)^-1``."""
        L_hat = np.linalg.inv(np.asarray(info, dtype=float) + np.eye(4))
        return cls(_dispersion_floor(0.5 * (L_hat + L_hat.T), alpha))

    @classmethod
    def fit(cls, l, weights=None, alpha: float = ACG_DISPERSION, tol: float = 1e-8,
            max_iter: int = 100) -> "Acg4":
        """Weighted maximum-likelihood fit by fixed-point iteration, then the dispersion floor."""
        l = np.asarray(l, dtype=float).reshape(-1, 4)
        if len(l) < 5:
            raise DegenerateFit("need at least 5 samples")
        v = _normalized_weights(weights, len(l))
        L = (v[:, None] * l).T @ l
        L = 4.0 * L / np.trace(L)
        for _ in range(max_iter):
            try:
                quad = np.einsum("ja,ja->j", l, np.linalg.solve(L, l.T).T)
            except np.linalg.LinAlgError as exc:
                raise FixedPointDivergence("ACG fixed point hit a singular matrix") from exc
            if not np.all(np.isfinite(quad)) or np.any(quad <= 0):
                raise FixedPointDivergence("ACG fixed point produced invalid quadratic forms")
            L_new = 4.0 * ((v / quad)[:, None] * l).T @ l
            L_new = 4.0 * L_new / np.trace(L_new)
            L_new = 0.5 * (L_new + L_new.T)
            step = np.linalg.norm(L_new - L)
            L = L_new
            if step < tol:
                break
        else:
            raise FixedPointDivergence(f"ACG fixed point did not converge in {max_iter} iterations")
        return cls(_dispersion_floor(L, alpha))


def acg_density(d: Acg4, l):
    return d.pdf(l)


def acg_sample(d: Acg4, rng, n=1):
    return d.sample(rng, n)


def acg_fit(l, weights=None, alpha=ACG_DISPERSION) -> Acg4:
    return Acg4.fit(l, weights, alpha)


# ---------------------------------------------------------------------------
# Factored pose proposal


Orientation = Union[VonMisesUniformMix, Acg4]


@dataclass(frozen=True, eq=False)
class PoseProposal:
    position: MvT3
    orientation: Orientation

    @property
    def pose_type(self) -> str:
        return "4dof" if isinstance(self.orientation, VonMisesUniformMix) else "6dof"

    def log_density(self, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        ori = Y[:, 3] if self.pose_type == "4dof" else Y[:, 3:7]
        return self.position.log_pdf(Y[:, :3]) + self.orientation.log_pdf(ori)

    def density(self, Y):
        return np.exp(self.log_density(Y))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        t = self.position.sample(rng, n)
        o = self.orientation.sample(rng, n)
        Y = np.concatenate([t, o[:, None] if o.ndim == 1 else o], axis=1)
        return geo.canonicalize_vectors(self.pose_type, Y)


def proposal_init(sol, alpha_uniform: float = UNIFORM_WEIGHT,
                  acg_dispersion: float = ACG_DISPERSION) -> PoseProposal:
    """Initial proposal centred on the solver optimum with its covariance blocks."""
    pose, cov = sol.pose, np.asarray(sol.cov, dtype=float)
    position = MvT3(pose.t, cov[:3, :3])
    if pose.pose_type == "4dof":
        return PoseProposal(position, VonMisesUniformMix.from_variance(pose.theta, cov[3, 3],
                                                                        alpha_uniform))
    B = geo.tangent_basis("6dof", pose.vector[None])[0][3:, 3:]
    cov_l = B.T @ cov[3:, 3:] @ B
    try:
        info = B @ np.linalg.inv(cov_l) @ B.T
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("quaternion covariance block is singular") from exc
    return PoseProposal(position, Acg4.from_inverse_covariance(info, acg_dispersion))


def proposal_refit(Y, weights, pose_type: str, alpha_uniform: float = UNIFORM_WEIGHT,
                   acg_dispersion: float = ACG_DISPERSION) -> PoseProposal:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    position = MvT3.fit(Y[:, :3], weights)
    if pose_type == "4dof":
        return PoseProposal(position, VonMisesUniformMix.fit(Y[:, 3], weights, alpha_uniform))
    return PoseProposal(position, Acg4.fit(Y[:, 3:7], weights, acg_dispersion))
