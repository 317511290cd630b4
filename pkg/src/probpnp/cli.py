"""Command-line front end.

Every command writes one primary output (``--out`` or standard output) that embeds the tool
version, the fully resolved configuration and the seed. JSON uses sorted keys; CSV files
start with ``#`` comment lines carrying the same metadata. Exit codes: 0 success, 1 domain
error (solver, sampling, training), 2 malformed input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import geometry as geo
from .distributions import proposal_init
from .errors import ProbPnPError, SchemaError
from .montecarlo import (AmisConfig, amis, effective_sample_size, frozen_kl_loss,
                         frozen_kl_objective, kl_loss, l_pred, laplace_l_pred,
                         mc_localization_score)
from .regloss import RegLossConfig, reg_loss
from .robust import HuberConfig
from .solver import SolverConfig, init_with_gt, solve
from .synth import SceneParams, gen_object_views, gen_scene, read_scene, scene_to_dict
from .trainer import TRACE_COLUMNS, ToyModel, TrainConfig, eval_model, train

BENCH_COLUMNS = ("pose_type", "noise_sigma", "n_points", "symmetry_order", "n_scenes", "n_failed",
                 "median_pos_err", "median_angle_err", "mean_amis_l_pred", "mean_laplace_l_pred",
                 "mean_l_pred_gap", "mean_ess")

SAMPLE_COLUMNS_4 = ("tx", "ty", "tz", "theta", "log_p", "log_q", "log_v")
SAMPLE_COLUMNS_6 = ("tx", "ty", "tz", "qw", "qx", "qy", "qz", "log_p", "log_q", "log_v")

BENCH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "pose_type": {"enum": list(geo.POSE_TYPES)},
        "noise_sigma": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "n_points": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
        "symmetry_order": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 1},
        "n_seeds": {"type": "integer", "minimum": 1},
        "weight": {"type": "number", "exclusiveMinimum": 0},
    },
}

DEFAULT_SUITE = {"noise_sigma": [0.0, 1.0, 3.0], "n_points": [16], "symmetry_order": [1, 4],
                 "n_seeds": 5, "weight": 1.0}


# ---------------------------------------------------------------------------
# Configuration and output helpers


def _solver_cfg(args) -> SolverConfig:
    huber = HuberConfig(delta_rel=args.delta_rel)
    return SolverConfig(pose_type=args.pose_type, n_hypotheses=args.hypotheses,
                        subset_size=args.subset_size, huber=huber)


def _amis_cfg(args) -> AmisConfig:
    if args.amis_K is None:
        return AmisConfig.for_pose_type(args.pose_type, args.amis_T)
    return AmisConfig(args.amis_T, args.amis_K)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _meta(args, config: dict) -> dict:
    return {"tool": "probpnp", "version": __version__, "command": args.command,
            "seed": args.seed, "config": _jsonable(config)}


def _dumps(doc) -> str:
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(meta: dict, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# tool: probpnp {meta['version']}\n")
    buf.write(f"# command: {meta['command']}\n")
    buf.write(f"# seed: {meta['seed']}\n")
    buf.write("# config: " + json.dumps(meta["config"], sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _flatten(doc: dict, prefix="") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple, np.ndarray)):
            for i, x in enumerate(np.asarray(v, dtype=float).ravel()):
                out[f"{key}[{i}]"] = float(x)
        else:
            out[key] = v
    return out


def _emit(args, meta: dict, record: dict) -> None:
    """Write a single-record result as JSON or as a one-row CSV."""
    if args.format == "csv":
        flat = _flatten(record)
        text = _csv_text(meta, list(flat), [flat])
    else:
        text = _dumps({"meta": meta, "result": record})
    _write(args.out, text)


def _write(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _load_scene(args):
    scene = read_scene(args.scene)
    if scene.pose_type != args.pose_type:
        # the scene file is authoritative for its parameterization
        args.pose_type = scene.pose_type
    return scene


def _pose_record(pose: geo.Pose) -> dict:
    if pose.pose_type == "4dof":
        return {"t": pose.t, "theta": pose.theta}
    return {"t": pose.t, "q": pose.l}


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    params = SceneParams(pose_type=args.pose_type, n_points=args.n_points, noise_sigma=args.noise,
                         symmetry_order=args.symmetry, weight=args.weight,
                         n_anchors=args.n_anchors, anchor_weight=args.anchor_weight)
    meta = _meta(args, {"scene": asdict(params), "count": args.count})
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count) if args.count > 1 \
        else [args.seed]
    if args.count == 1:
        scene = gen_scene(params, int(seeds[0]))
        _write_scene_with_meta(scene, args.out, meta)
        return 0
    out = Path(args.out or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(seeds):
        _write_scene_with_meta(gen_scene(params, int(s)), out / f"scene_{i:04d}.json", meta)
    return 0


def _write_scene_with_meta(scene, path, meta) -> None:
    doc = scene_to_dict(scene)
    doc["meta"] = meta
    _write(path, _dumps(doc))


def cmd_solve(args) -> int:
    scene = _load_scene(args)
    cfg = _solver_cfg(args)
    sol = solve(scene.camera, scene.corr, cfg, rng=np.random.default_rng(args.seed))
    pos_err, ang_err = geo.geodesic_distance(sol.pose, scene.y_gt)
    record = {"pose": _pose_record(sol.pose), "cov": sol.cov, "cost": sol.cost,
              "log_likelihood": sol.log_likelihood, "converged": sol.converged,
              "iterations": sol.iterations, "pos_err": pos_err, "angle_err": ang_err,
              "laplace_l_pred": laplace_l_pred(sol)}
    _emit(args, _meta(args, {"solver": asdict(cfg), "scene": args.scene}), record)
    return 0


def cmd_sample(args) -> int:
    scene = _load_scene(args)
    cfg, acfg = _solver_cfg(args), _amis_cfg(args)
    rng = np.random.default_rng(args.seed)
    sol = solve(scene.camera, scene.corr, cfg, rng=rng)
    batch = amis(scene.camera, scene.corr, acfg, proposal_init(sol), rng, cfg.huber)
    record = {"pose": _pose_record(sol.pose), "l_pred": l_pred(batch),
              "laplace_l_pred": laplace_l_pred(sol), "ess": effective_sample_size(batch.log_v),
              "ess_history": list(batch.ess_history), "K": batch.K,
              "mc_localization_score": mc_localization_score(batch, sol)}
    meta = _meta(args, {"solver": asdict(cfg), "amis": asdict(acfg), "scene": args.scene})
    _emit(args, meta, record)
    if args.dump_samples:
        cols = SAMPLE_COLUMNS_4 if batch.pose_type == "4dof" else SAMPLE_COLUMNS_6
        data = np.column_stack([batch.poses, batch.log_p, batch.log_q, batch.log_v])
        rows = [dict(zip(cols, r)) for r in data]
        _write(args.dump_samples, _csv_text(meta, cols, rows))
    return 0


def cmd_loss(args) -> int:
    scene = _load_scene(args)
    cfg, acfg = _solver_cfg(args), _amis_cfg(args)
    rng = np.random.default_rng(args.seed)
    rep = kl_loss(scene.camera, scene.corr, scene.y_gt, cfg, acfg, rng=rng)
    record = {"l_tgt": rep.l_tgt, "l_pred": rep.l_pred, "total": rep.total,
              "grad_x3D": rep.grad_x3D, "grad_x2D": rep.grad_x2D, "grad_w2D": rep.grad_w2D}
    config = {"solver": asdict(cfg), "amis": asdict(acfg), "scene": args.scene}
    if args.with_reg:
        rcfg = RegLossConfig()
        reg = reg_loss(scene.camera, scene.corr, rep.solution.pose, scene.y_gt, rcfg, cfg)
        record["reg"] = {"loss": reg.loss, "pos_loss": reg.pos_loss,
                         "orient_loss": reg.orient_loss, "grad_x3D": reg.grad_x3D,
                         "grad_x2D": reg.grad_x2D, "grad_w2D": reg.grad_w2D}
        config["reg"] = asdict(rcfg)
    _emit(args, _meta(args, config), record)
    return 0


def finite_difference(fun, corr: geo.CorrespondenceSet, h: float = 1e-5):
    """Central differences of ``fun(corr)`` wrt x3d, x2d and w2d."""
    out = []
    for name in ("x3d", "x2d", "w2d"):
        arr = getattr(corr, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            a = arr.copy()
            a[idx] += h
            fp = fun(corr.with_arrays(**{name: a}))
            a[idx] -= 2.0 * h
            fm = fun(corr.with_arrays(**{name: a}))
            g[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Largest absolute deviation relative to the largest gradient entry, per block.

    ``floor`` bounds the denominator from below so that blocks whose gradient vanishes
    (e.g. the reg loss at an exact solution) are judged by their absolute error.
    """
    errs = []
    for a, n in zip(analytic, numeric):
        scale = max(float(np.abs(n).max()), float(np.abs(a).max()), floor)
        errs.append(float(np.abs(a - n).max()) / scale)
    return max(errs)


def cmd_gradcheck(args) -> int:
    cfg, acfg = _solver_cfg(args), _amis_cfg(args)
    if args.scene:
        scene = _load_scene(args)
        cfg = replace(cfg, pose_type=scene.pose_type)
    else:
        scene = gen_scene(SceneParams(pose_type=args.pose_type, n_points=10, noise_sigma=2.0,
                                      weight=0.3), args.seed)
    cam, corr, hcfg = scene.camera, scene.corr, cfg.huber
    rng = np.random.default_rng(args.seed)
    rep = kl_loss(cam, corr, scene.y_gt, cfg, acfg, rng=rng)
    batch = rep.batch
    kl_num = finite_difference(lambda c: frozen_kl_objective(cam, c, scene.y_gt, batch, hcfg),
                               corr, args.h)
    kl_an = frozen_kl_loss(cam, corr, scene.y_gt, batch, hcfg)
    kl_err = max_relative_error([kl_an.grad_x3D, kl_an.grad_x2D, kl_an.grad_w2D], kl_num)
    y_star = rep.solution.pose
    rcfg = RegLossConfig()
    reg = reg_loss(cam, corr, y_star, scene.y_gt, rcfg, cfg)
    reg_num = finite_difference(lambda c: reg_loss(cam, c, y_star, scene.y_gt, rcfg, cfg).loss,
                                corr, args.h)
    reg_err = max_relative_error([reg.grad_x3D, reg.grad_x2D, reg.grad_w2D], reg_num)
    record = {"kl_max_rel_err": kl_err, "reg_max_rel_err": reg_err,
              "max_rel_err": max(kl_err, reg_err), "h": args.h,
              "passed": bool(max(kl_err, reg_err) < 1e-4)}
    config = {"solver": asdict(cfg), "amis": asdict(acfg), "reg": asdict(rcfg),
              "scene": args.scene, "h": args.h}
    _emit(args, _meta(args, config), record)
    return 0


def cmd_train(args) -> int:
    if args.scene_dir:
        files = sorted(Path(args.scene_dir).glob("*.json"))
        if not files:
            raise SchemaError("no scene files found", field=str(args.scene_dir))
        views = [read_scene(f) for f in files]
        n = views[0].corr.n
        if any(v.corr.n != n for v in views):
            raise SchemaError("all views must have the same number of points", field="points")
        args.pose_type = views[0].pose_type
    else:
        params = SceneParams(pose_type=args.pose_type, n_points=args.n_points)
        views = gen_object_views(params, args.n_views + args.n_heldout, args.seed)
    train_views, test_views = views[:args.n_views], views[args.n_views:]
    scfg = _solver_cfg(args)
    tcfg = TrainConfig(lr=args.lr, steps=args.steps, use_kl=not args.no_kl, use_reg=args.use_reg,
                       grad_clip=args.grad_clip, seed=args.seed, learn_x2d=args.learn_x2d,
                       solver=scfg, amis=_amis_cfg(args))
    rng = np.random.default_rng(args.seed)
    n = train_views[0].corr.n
    model = ToyModel.random(n, rng, log_scale=float(np.log(n)))
    result = train(train_views, model, tcfg, rng)
    meta = _meta(args, {"train": asdict(tcfg), "scene_dir": args.scene_dir,
                        "n_views": args.n_views, "n_heldout": args.n_heldout})
    rows = [{c: getattr(r, c) for c in TRACE_COLUMNS} for r in result.trace]
    _write(args.out, _csv_text(meta, TRACE_COLUMNS, rows))
    if args.model_out:
        doc = {"meta": meta, "model": result.model.to_dict()}
        if test_views:
            doc["heldout"] = eval_model(result.model, test_views, scfg, seed=args.seed).to_dict()
        _write(args.model_out, _dumps(doc))
    return 0


def _bench_run(job):
    pose_type, sigma, n_points, sym, weight, seed, scfg, acfg = job
    anchors = 3 if sym > 1 else 0
    params = SceneParams(pose_type=pose_type, n_points=n_points, noise_sigma=sigma,
                         symmetry_order=sym, weight=weight, n_anchors=anchors)
    scene = gen_scene(params, seed)
    rng = np.random.default_rng(seed)
    try:
        init = init_with_gt(scene.camera, scene.corr, scfg, rng, scene.y_gt)
        sol = solve(scene.camera, scene.corr, scfg, init=init)
        batch = amis(scene.camera, scene.corr, acfg, proposal_init(sol), rng, scfg.huber)
    except ProbPnPError:
        return None
    pos_err, ang_err = geo.geodesic_distance(sol.pose, scene.y_gt)
    return (pos_err, ang_err, l_pred(batch), laplace_l_pred(sol),
            effective_sample_size(batch.log_v))


def _load_suite(path):
    if path is None:
        return dict(DEFAULT_SUITE)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    errors = sorted(jsonschema.Draft7Validator(BENCH_SCHEMA).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        field = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            field = sorted(set(doc) - set(BENCH_SCHEMA["properties"]))[0]
        raise SchemaError(err.message, field=field)
    return {**DEFAULT_SUITE, **doc}


def cmd_bench(args) -> int:
    suite = _load_suite(args.suite)
    pose_type = suite.get("pose_type", args.pose_type)
    args.pose_type = pose_type
    scfg, acfg = _solver_cfg(args), _amis_cfg(args)
    cells = [(s, n, k) for s in suite["noise_sigma"] for n in suite["n_points"]
             for k in suite["symmetry_order"] if n % k == 0]
    children = np.random.SeedSequence(args.seed).spawn(len(cells))
    jobs, owners = [], []
    for ci, ((s, n, k), ss) in enumerate(zip(cells, children)):
        for seed in ss.generate_state(suite["n_seeds"]):
            jobs.append((pose_type, s, n, k, suite["weight"], int(seed), scfg, acfg))
            owners.append(ci)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_bench_run, jobs))
    else:
        results = [_bench_run(j) for j in jobs]
    rows = []
    for ci, (s, n, k) in enumerate(cells):
        res = [r for o, r in zip(owners, results) if o == ci]
        ok = np.array([r for r in res if r is not None], dtype=float).reshape(-1, 5)
        nan = float("nan")
        rows.append({
            "pose_type": pose_type, "noise_sigma": float(s), "n_points": n, "symmetry_order": k,
            "n_scenes": len(res), "n_failed": len(res) - len(ok),
            "median_pos_err": float(np.median(ok[:, 0])) if len(ok) else nan,
            "median_angle_err": float(np.median(ok[:, 1])) if len(ok) else nan,
            "mean_amis_l_pred": float(ok[:, 2].mean()) if len(ok) else nan,
            "mean_laplace_l_pred": float(ok[:, 3].mean()) if len(ok) else nan,
            "mean_l_pred_gap": float((ok[:, 2] - ok[:, 3]).mean()) if len(ok) else nan,
            "mean_ess": float(ok[:, 4].mean()) if len(ok) else nan,
        })
    meta = _meta(args, {"suite": suite, "solver": asdict(scfg), "amis": asdict(acfg)})
    if args.format == "json":
        _write(args.out, _dumps({"meta": meta, "rows": rows}))
    else:
        _write(args.out, _csv_text(meta, BENCH_COLUMNS, rows))
    return 0


# ---------------------------------------------------------------------------
# Parser


EPILOG = """\
exit codes: 0 success, 1 domain error, 2 malformed input or configuration.

CSV outputs begin with '#' lines (tool version, command, seed, resolved config).
  train trace columns: {trace}
  bench columns:       {bench}
  sample dump columns: tx,ty,tz,theta|qw,qx,qy,qz,log_p,log_q,log_v
""".format(trace=",".join(TRACE_COLUMNS), bench=",".join(BENCH_COLUMNS))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--pose-type", choices=geo.POSE_TYPES, default="6dof")
    p.add_argument("--amis-T", type=int, default=4, help="AMIS iterations (default 4)")
    p.add_argument("--amis-K", type=int, default=None,
                   help="samples per AMIS iteration (default 128 for 6dof, 32 for 4dof)")
    p.add_argument("--delta-rel", type=float, default=1.0, help="relative Huber threshold")
    p.add_argument("--hypotheses", type=int, default=64, help="random-subset hypotheses")
    p.add_argument("--subset-size", type=int, default=None, help="points per hypothesis subset")
    p.add_argument("--out", default=None, help="output path (default: standard output)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--dump-samples", default=None, metavar="PATH",
                   help="write every AMIS sample to a CSV file (sample command)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probpnp", description=__doc__.splitlines()[0],
                                     epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"probpnp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        return p

    p = add("gen", "generate synthetic scene files")
    p.add_argument("--n-points", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    p.add_argument("--symmetry", type=int, default=1, help="yaw symmetry order")
    p.add_argument("--weight", type=float, default=1.0)
    p.add_argument("--n-anchors", type=int, default=0)
    p.add_argument("--anchor-weight", type=float, default=100.0)
    p.add_argument("--count", type=int, default=1, help="number of scenes (>1 writes a directory)")
    p.set_defaults(func=cmd_gen)

    for name, func, text in (("solve", cmd_solve, "solve a scene"),
                             ("sample", cmd_sample, "AMIS posterior sampling summary"),
                             ("loss", cmd_loss, "KL loss and its gradients")):
        p = add(name, text)
        p.add_argument("scene", help="scene JSON file")
        if name == "loss":
            p.add_argument("--with-reg", action="store_true", help="also report the reg loss")
        p.set_defaults(func=func)

    p = add("gradcheck", "finite-difference check of the loss gradients")
    p.add_argument("scene", nargs="?", default=None, help="scene JSON (default: generated)")
    p.add_argument("--h", type=float, default=1e-5, help="central difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = add("train", "toy end-to-end training; writes the trace CSV")
    p.add_argument("scene_dir", nargs="?", default=None,
                   help="directory of views of one object (default: generated)")
    p.add_argument("--n-views", type=int, default=8)
    p.add_argument("--n-heldout", type=int, default=8)
    p.add_argument("--n-points", type=int, default=16)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--use-reg", action="store_true")
    p.add_argument("--no-kl", action="store_true")
    p.add_argument("--learn-x2d", action="store_true")
    p.add_argument("--model-out", default=None, help="final model and held-out metrics JSON")
    p.set_defaults(func=cmd_train, format="csv")

    p = add("bench", "sweep over noise, point count and symmetry order")
    p.add_argument("suite", nargs="?", default=None, help="suite JSON (default built-in)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_bench, format="csv")
    return parser


def _report(code: str, message: str, **extra) -> None:
    doc = {"error": code, "message": message, **{k: v for k, v in extra.items() if v is not None}}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        _report(exc.code, str(exc), field=exc.field, line=exc.line)
        return 2
    except (OSError, ValueError) as exc:
        _report("config_error", str(exc))
        return 2
    except ProbPnPError as exc:
        _report(exc.code, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
