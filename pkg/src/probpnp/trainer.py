"""Toy end-to-end learner for a shared correspondence parameter block.

A :class:`ToyModel` holds free 3D coordinates and weight logits for the N points of one
object. For each view the observed 2D points are paired with the learned 3D points and
weights, and plain clipped gradient descent is run on the KL loss (and optionally the
derivative regularization loss).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from . import geometry as geo
from .errors import DivergenceDetected, ProbPnPError
from .montecarlo import AmisConfig, effective_sample_size, kl_loss, l_pred
from .regloss import DynamicWeightState, RegLossConfig, dynamic_kl_weight, reg_loss
from .solver import SolverConfig, solve
from .synth import Scene

TRACE_COLUMNS = ("step", "loss_total", "loss_kl", "loss_reg", "median_angle_err",
                 "median_pos_err", "grad_norm")


@dataclass
class ToyModel:
    x3d: np.ndarray
    w_logits: np.ndarray
    log_scale: float = 0.0
    x2d_offsets: Optional[np.ndarray] = None

    @classmethod
    def random(cls, n_points: int, rng: np.random.Generator, extent: float = 0.5,
               log_scale: float = 0.0) -> "ToyModel":
        return cls(rng.uniform(-extent, extent, size=(n_points, 3)), np.zeros((n_points, 2)),
                   float(log_scale))

    @property
    def n(self) -> int:
        return len(self.x3d)

    @property
    def w2d(self) -> np.ndarray:
        """``exp(log_scale) * softmax(w_logits)`` with the softmax over points per component."""
        return np.exp(self.log_scale) * softmax(self.w_logits, axis=0)

    def correspondences(self, scene: Scene, view: Optional[int] = None) -> geo.CorrespondenceSet:
        x2d = scene.corr.x2d
        if self.x2d_offsets is not None and view is not None:
            x2d = x2d + self.x2d_offsets[view]
        return geo.CorrespondenceSet(self.x3d, x2d, self.w2d)

    def copy(self) -> "ToyModel":
        off = None if self.x2d_offsets is None else self.x2d_offsets.copy()
        return ToyModel(self.x3d.copy(), self.w_logits.copy(), float(self.log_scale), off)

    def to_dict(self) -> dict:
        out = {"x3d": self.x3d.tolist(), "w_logits": self.w_logits.tolist(),
               "log_scale": float(self.log_scale), "w2d": self.w2d.tolist()}
        if self.x2d_offsets is not None:
            out["x2d_offsets"] = self.x2d_offsets.tolist()
        return out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    steps: int = 2000
    use_kl: bool = True
    use_reg: bool = False
    grad_clip: float = 10.0
    seed: int = 0
    learn_x2d: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(pose_type="4dof"))
    amis: AmisConfig = field(default_factory=lambda: AmisConfig(4, 32))
    reg: RegLossConfig = field(default_factory=RegLossConfig)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if not (self.use_kl or self.use_reg):
            raise ValueError("at least one loss must be enabled")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss_total: float
    loss_kl: float
    loss_reg: float
    median_angle_err: float
    median_pos_err: float
    grad_norm: float


@dataclass
class TrainResult:
    model: ToyModel
    trace: list

    def to_csv(self) -> str:
        return trace_csv(self.trace)


def trace_csv(rows: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in rows:
        writer.writerow([r.step] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])
    return buf.getvalue()


def weight_param_grads(model: ToyModel, g_w: np.ndarray):
    """Chain rule from realized weights to ``(w_logits, log_scale)``."""
    w = model.w2d
    sig = softmax(model.w_logits, axis=0)
    g_logits = w * (g_w - (sig * g_w).sum(axis=0, keepdims=True))
    return g_logits, float((g_w * w).sum())


def clip_by_norm(grads, bound: float):
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))
    k = 1.0 if norm <= bound else bound / norm
    return [g * k for g in grads], norm


def _step_losses(model: ToyModel, scenes, cfg: TrainConfig, rng, weight_state):
    """Mean loss over scenes and its gradients wrt the model parameters."""
    scfg = replace(cfg.solver, pose_type=scenes[0].pose_type)
    S = len(scenes)
    g3 = np.zeros_like(model.x3d)
    gw = np.zeros_like(model.x3d[:, :2])
    g2 = np.zeros((S,) + model.x3d[:, :2].shape)
    l_kl = l_reg = 0.0
    ang, pos = [], []
    kl_weight = dynamic_kl_weight(weight_state, model.correspondences(scenes[0]),
                                  cfg.reg.ema_momentum) if cfg.use_kl else 0.0
    for v, sc in enumerate(scenes):
        corr = model.correspondences(sc, v)
        y_star = None
        if cfg.use_kl:
            rep = kl_loss(sc.camera, corr, sc.y_gt, scfg, cfg.amis, rng=rng)
            l_kl += kl_weight * rep.total / S
            g3 += kl_weight * rep.grad_x3D / S
            g2[v] += kl_weight * rep.grad_x2D / S
            gw += kl_weight * rep.grad_w2D / S
            y_star = rep.solution.pose
        if y_star is None:
            y_star = solve(sc.camera, corr, scfg, rng=rng).pose
        if cfg.use_reg:
            reg = reg_loss(sc.camera, corr, y_star, sc.y_gt, cfg.reg, scfg)
            l_reg += reg.loss / S
            g3 += reg.grad_x3D / S
            g2[v] += reg.grad_x2D / S
            gw += reg.grad_w2D / S
        p_err, a_err = geo.geodesic_distance(y_star, sc.y_gt)
        ang.append(a_err)
        pos.append(p_err)
    return l_kl, l_reg, g3, g2, gw, float(np.median(ang)), float(np.median(pos))


def train(scenes: Sequence[Scene], model: ToyModel, cfg: TrainConfig = TrainConfig(),
          rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Clipped gradient descent on the enabled losses; returns the final model and trace."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    model = model.copy()
    if cfg.learn_x2d and model.x2d_offsets is None:
        model.x2d_offsets = np.zeros((len(scenes), model.n, 2))
    weight_state = DynamicWeightState()
    trace = []
    initial = None
    bad = 0
    for step in range(cfg.steps):
        l_kl, l_reg, g3, g2, gw, ang, pos = _step_losses(model, scenes, cfg, rng, weight_state)
        total = l_kl + l_reg
        g_logits, g_scale = weight_param_grads(model, gw)
        grads = [g3, g_logits, np.array(g_scale)]
        if cfg.learn_x2d:
            grads.append(g2)
        (c3, c_logits, c_scale, *c2), norm = clip_by_norm(grads, cfg.grad_clip)
        trace.append(TraceRow(step, total, l_kl, l_reg, ang, pos, norm))
        if not np.isfinite(total) or not np.isfinite(norm):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        if initial is None:
            initial = total
        # "grows 10x": more than (factor - 1) |initial| above the starting loss
        bad = bad + 1 if total - initial > (cfg.divergence_factor - 1.0) * abs(initial) else 0
        if bad >= cfg.divergence_patience:
            raise DivergenceDetected(f"loss above {cfg.divergence_factor}x its initial value "
                                     f"for {bad} steps")
        model.x3d -= cfg.lr * c3
        model.w_logits -= cfg.lr * c_logits
        model.log_scale -= cfg.lr * float(c_scale)
        if cfg.learn_x2d:
            model.x2d_offsets -= cfg.lr * c2[0]
    return TrainResult(model, trace)


@dataclass(frozen=True)
class EvalMetrics:
    median_angle_err: float
    median_pos_err: float
    mean_angle_err: float
    mean_pos_err: float
    median_rel_pos_err: float
    mean_l_pred: float
    mean_ess: float
    n_failed: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def eval_model(model: ToyModel, scenes: Sequence[Scene], solver_cfg: Optional[SolverConfig] = None,
               amis_cfg: Optional[AmisConfig] = None, seed: int = 0) -> EvalMetrics:
    """Solve every view from the random-subset hypotheses and aggregate pose errors.

    Each view uses its own generator keyed by ``seed`` and the bytes of its ground-truth pose,
    so the aggregate does not depend on the order of ``scenes``. When
    ``amis_cfg`` is given the KL loss statistics (l_pred, ESS) are included.
    """
    scenes = list(scenes)
    scfg = solver_cfg or SolverConfig(pose_type=scenes[0].pose_type)
    scfg = replace(scfg, pose_type=scenes[0].pose_type)
    ang, pos, rel, lp, ess = [], [], [], [], []
    failed = 0
    for sc in scenes:
        corr = model.correspondences(sc)
        key = int(np.frombuffer(sc.y_gt.vector.tobytes(), dtype=np.uint64).sum() % (2 ** 32))
        rng = np.random.default_rng([seed, key])
        try:
            sol = solve(sc.camera, corr, scfg, rng=rng)
        except ProbPnPError:
            failed += 1
            ang.append(np.pi)
            pos.append(np.inf)
            rel.append(np.inf)
            continue
        p_err, a_err = geo.geodesic_distance(sol.pose, sc.y_gt)
        ang.append(a_err)
        pos.append(p_err)
        rel.append(p_err / sc.y_gt.t[2])
        if amis_cfg is not None:
            rep = kl_loss(sc.camera, corr, sc.y_gt, scfg, amis_cfg, rng=rng)
            lp.append(l_pred(rep.batch))
            ess.append(effective_sample_size(rep.batch.log_v))
    return EvalMetrics(float(np.median(ang)), float(np.median(pos)), float(np.mean(ang)),
                       float(np.mean(pos)), float(np.median(rel)),
                       float(np.mean(lp)) if lp else float("nan"),
                       float(np.mean(ess)) if ess else float("nan"), failed)
