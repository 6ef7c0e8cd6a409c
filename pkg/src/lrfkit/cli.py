"""Command-line entry point: ``lrfkit {synth,train,eval,info}``.

Every command reads an optional JSON config, applies flag overrides on top
and writes its results under the output directory (``--out``, else the
``LRFKIT_OUT`` environment variable, else ``./lrfkit-out``). Logs go to
standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .errors import (
    ChecksumError,
    ConfigError,
    DegenerateGeometryError,
    EmptyPatchError,
    InsufficientDataError,
    InvalidInputError,
    LrfError,
    PoseFailureError,
    TrainingDivergedError,
)
from .evaluation import (
    METHOD_NAMES,
    NET_METHODS,
    POSE_HEADER,
    REPEAT_HEADER,
    RPC_HEADER,
    csv_text,
    get_method,
    one_point_ransac,
    repeatability_experiment,
    rpc_curve,
    match_descriptors,
    simple_descriptor,
)
from .geometry import (
    SURFACE_KINDS,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    decimate,
    extract_patch,
    synth_surface,
)
from .lrfnet import DEFAULT_HIDDEN, LrfNetConfig, WeightNet
from .training import TrainConfig, generate_pairs, synthetic_curriculum, trace_to_csv, train

log = logging.getLogger("lrfkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "LRFKIT_OUT"

SYNTH_DEFAULTS = {
    "kinds": ["plane-with-bumps", "ridge", "hemisphere", "random-smooth"],
    "n_models": 1,
    "n_points": 6000,
    "noise_levels": [0.1, 0.2, 0.3, 0.4, 0.5],
    "keep_fractions": [],
    "translation_scale": 1.0,
    "binary": False,
    "seed": 0,
}

TRAIN_DEFAULTS = {
    **TrainConfig().to_dict(),
    "data": None,  # synth manifest; None draws the built-in synthetic curriculum
    "n_pairs": 2000,
    "radius_mr": 15.0,
    "noise_mr": 0.1,
    "kinds": ["random-smooth"],
    "n_surfaces": 8,
    "surface_points": 6000,
    "hidden": list(DEFAULT_HIDDEN),
    "resume": None,
}

EVAL_DEFAULTS = {
    "mode": "repeat",
    "data": None,
    "methods": ["shot", "toldi"],
    "weights": None,
    "n_keypoints": 1000,
    "radius_mr": 15.0,
    "n_points": 256,
    "thresholds": [round(0.05 * i, 2) for i in range(21)],
    "iterations": 100,
    "inlier_radius": 2.0,
    "correspondences": "descriptor",
    "seed": 0,
}

EVAL_MODES = ("repeat", "match", "pose")


# --- config ----------------------------------------------------------------------


def resolve_config(defaults: dict, path, overrides: dict) -> dict:
    """defaults < config file < explicit flags. Unknown keys are rejected."""
    cfg = dict(defaults)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def output_dir(arg) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "lrfkit-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _sub_seed(*parts) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def _load_manifest(path) -> tuple:
    path = _require_file(path, "data manifest")
    try:
        doc = json.loads(path.read_text())
        entries = doc["entries"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"bad manifest {path}: {exc}") from exc
    for e in entries:
        for key in ("model", "scene", "gt"):
            _require_file(path.parent / e[key], f"{key} file")
    return path.parent, entries


# --- synth -------------------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path) -> list:
    for kind in cfg["kinds"]:
        if kind not in SURFACE_KINDS:
            raise ConfigError(f"unknown surface kind {kind!r}; valid kinds: {', '.join(SURFACE_KINDS)}")
    perturb = [("noise", float(v)) for v in cfg["noise_levels"]]
    perturb += [("decimation", float(v)) for v in cfg["keep_fractions"]]
    entries = []
    for k, kind in enumerate(cfg["kinds"]):
        for m in range(int(cfg["n_models"])):
            stem = f"{kind}-{m}"
            model = synth_surface(kind, int(cfg["n_points"]), _sub_seed(cfg["seed"], k, m, 0))
            gt = RigidTransform.random(_sub_seed(cfg["seed"], k, m, 1), translation_scale=float(cfg["translation_scale"]))
            lio.write_ply(out / f"{stem}-model.ply", model, binary=cfg["binary"])
            lio.write_gt(out / f"{stem}-gt.json", gt)
            moved = apply_transform(model, gt.inverse())
            for p, (what, level) in enumerate(perturb):
                seed = _sub_seed(cfg["seed"], k, m, 2, p)
                if what == "noise":
                    scene = add_gaussian_noise(moved, level, seed, mr=model.resolution_mr)
                else:
                    scene = decimate(moved, level, seed)
                name = f"{stem}-{what}-{level:g}.ply"
                lio.write_ply(out / name, scene, binary=cfg["binary"])
                entries.append({
                    "kind": kind, "model": f"{stem}-model.ply", "scene": name, "gt": f"{stem}-gt.json",
                    "perturbation": what, "level": level,
                })
                log.info("wrote %s", name)
    _write_json(out / "manifest.json", {"config": cfg, "entries": entries})
    return entries


# --- train -------------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path):
    try:
        tcfg = TrainConfig(**{k: cfg[k] for k in TrainConfig().to_dict()})
        lrf_cfg = LrfNetConfig(n_points=tcfg.n_points, hidden=tuple(cfg["hidden"]), seed=tcfg.seed)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    net = None
    if cfg["resume"] is not None:
        net = WeightNet.load(_require_file(cfg["resume"], "resume weight file"))
    if cfg["data"] is None:
        pairs = synthetic_curriculum(
            int(cfg["n_pairs"]), tcfg, kinds=tuple(cfg["kinds"]), n_surfaces=int(cfg["n_surfaces"]),
            n_points=int(cfg["surface_points"]), radius_mr=float(cfg["radius_mr"]), noise_mr=float(cfg["noise_mr"]),
        )
    else:
        root, entries = _load_manifest(cfg["data"])
        models = sorted({(e["model"], e["gt"]) for e in entries})
        pairs = []
        per = [int(cfg["n_pairs"]) // len(models) + (i < int(cfg["n_pairs"]) % len(models)) for i in range(len(models))]
        for i, ((mfile, gfile), count) in enumerate(zip(models, per)):
            if count == 0:
                continue
            model = lio.read_ply(root / mfile)
            sub = TrainConfig(**{**tcfg.to_dict(), "seed": _sub_seed(tcfg.seed, i)})
            pairs += generate_pairs(model, lio.read_gt(root / gfile), count,
                                    float(cfg["radius_mr"]) * model.resolution_mr, sub, noise_mr=float(cfg["noise_mr"]))
    log.info("training on %d patch pairs", len(pairs))
    net, trace = train(pairs, tcfg, lrf_cfg, net=net)
    net.save(out / "weights.json")
    (out / "loss.csv").write_text(trace_to_csv(trace))
    _write_json(out / "train-config.json", cfg)
    return net, trace


# --- eval --------------------------------------------------------------------------


def _methods(cfg):
    for name in cfg["methods"]:
        if name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {name!r}; valid names: {', '.join(METHOD_NAMES)}")
    net = None
    if any(name in NET_METHODS for name in cfg["methods"]):
        if cfg["weights"] is None:
            raise ConfigError("methods lrfnet* need a weight file (weights)")
        net = WeightNet.load(_require_file(cfg["weights"], "weight file"))
    lrf_cfg = LrfNetConfig(n_points=int(cfg["n_points"]), seed=int(cfg["seed"]))
    return {name: get_method(name, net, lrf_cfg) for name in cfg["methods"]}


def _corresponding_keypoints(model, scene, gt, n, seed):
    mr = model.resolution_mr
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(model), size=min(n, len(model)), replace=False)
    dist, nearest = scene.tree.query(gt.inverse().apply(model.points[picks]))
    ok = dist <= mr
    return picks[ok], nearest[ok]


def _frames(fn, cloud, indices, r):
    """Frames at the given points; ``None`` where the method is undefined."""
    out = []
    for i in indices:
        try:
            patch = extract_patch(cloud, int(i), r)
            out.append((patch, fn(patch)))
        except (DegenerateGeometryError, EmptyPatchError):
            out.append(None)
    return out


def _groups(entries):
    groups = {}
    for e in entries:
        groups.setdefault((e["perturbation"], float(e["level"])), []).append(e)
    return sorted(groups.items())


def cmd_eval(cfg: dict, out: Path) -> list:
    if cfg["mode"] not in EVAL_MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; valid modes: {', '.join(EVAL_MODES)}")
    if cfg["correspondences"] not in ("descriptor", "gt"):
        raise ConfigError("correspondences must be 'descriptor' or 'gt'")
    methods = _methods(cfg)
    root, entries = _load_manifest(cfg["data"])
    seed = int(cfg["seed"])
    written = []
    if cfg["mode"] == "repeat":
        rows = []
        for name, fn in methods.items():
            for (what, level), group in _groups(entries):
                values = []
                for e in group:
                    model, scene = lio.read_ply(root / e["model"]), lio.read_ply(root / e["scene"])
                    res = repeatability_experiment(
                        model, scene, lio.read_gt(root / e["gt"]), fn, n_keypoints=int(cfg["n_keypoints"]),
                        r=float(cfg["radius_mr"]) * model.resolution_mr, seed=seed,
                    )
                    values += res.values
                rows.append((name, what, level, float(np.mean(values)), len(values)))
                log.info("%s %s=%g meancos %.4f", name, what, level, rows[-1][3])
        (out / "repeat.csv").write_text(csv_text(REPEAT_HEADER, rows))
        return [out / "repeat.csv"]

    for (what, level), group in _groups(entries):
        rows = []
        for name, fn in methods.items():
            curves = []
            for e in group:
                model, scene, gt = lio.read_ply(root / e["model"]), lio.read_ply(root / e["scene"]), lio.read_gt(root / e["gt"])
                mr = model.resolution_mr
                r = float(cfg["radius_mr"]) * mr
                mi, si = _corresponding_keypoints(model, scene, gt, int(cfg["n_keypoints"]), seed)
                fm, fs = _frames(fn, model, mi, r), _frames(fn, scene, si, r)
                keep = [k for k in range(len(mi)) if fm[k] is not None and fs[k] is not None]
                if len(keep) < 2:
                    raise InsufficientDataError(f"{name}: fewer than two usable keypoints in {e['scene']}")
                if cfg["mode"] == "match":
                    md = [simple_descriptor(fm[k][0], lrf=fm[k][1]) for k in keep]
                    sd = [simple_descriptor(fs[k][0], lrf=fs[k][1]) for k in keep]
                    truth = [(k, k) for k in range(len(keep))]
                    curves.append(rpc_curve(md, sd, truth, cfg["thresholds"]))
                    continue
                if cfg["correspondences"] == "gt":
                    corr = [(k, k) for k in range(len(keep))]
                else:
                    md = [simple_descriptor(fm[k][0], lrf=fm[k][1]) for k in keep]
                    sd = [simple_descriptor(fs[k][0], lrf=fs[k][1]) for k in keep]
                    corr = match_descriptors(md, sd, keep=len(keep))
                est = one_point_ransac(
                    corr, model.points[mi[keep]], scene.points[si[keep]],
                    [fm[k][1] for k in keep], [fs[k][1] for k in keep],
                    iterations=int(cfg["iterations"]), inlier_radius=float(cfg["inlier_radius"]),
                    seed=seed, mr=mr, gt=gt,
                )
                rows.append((name, est.err_r, est.err_t, est.consensus_iteration))
            if curves:
                mean = np.mean(np.array(curves), axis=0)
                rows += [(name, float(t), float(rc), float(fp)) for t, (rc, fp) in zip(cfg["thresholds"], mean)]
        stem = "rpc" if cfg["mode"] == "match" else "pose"
        path = out / f"{stem}-{what}-{level:g}.csv"
        path.write_text(csv_text(RPC_HEADER if stem == "rpc" else POSE_HEADER, rows))
        written.append(path)
    return written


# --- info --------------------------------------------------------------------------


def cmd_info(path) -> str:
    net = WeightNet.load(_require_file(path, "weight file"))
    return net.summary()


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrfkit", description="Local reference frames: synthesis, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./lrfkit-out)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")

    s = sub.add_parser("synth", help="write synthetic model/scene PLY pairs with ground truth")
    common(s)
    s.add_argument("--kinds", nargs="+")
    s.add_argument("--n-models", type=int, dest="n_models")
    s.add_argument("--n-points", type=int, dest="n_points")
    s.add_argument("--noise-levels", nargs="*", type=float, dest="noise_levels")
    s.add_argument("--keep-fractions", nargs="*", type=float, dest="keep_fractions")
    s.add_argument("--binary", action="store_const", const=True)

    t = sub.add_parser("train", help="fit the weight network")
    common(t)
    t.add_argument("--data", help="manifest.json written by synth")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--n-pairs", type=int, dest="n_pairs")
    t.add_argument("--n-surfaces", type=int, dest="n_surfaces")
    t.add_argument("--surface-points", type=int, dest="surface_points")
    t.add_argument("--chamfer", choices=("min", "sum"))
    t.add_argument("--variant", choices=("sum1", "sum2"))
    t.add_argument("--resume", help="start from this weight file")

    e = sub.add_parser("eval", help="repeatability, matching or pose experiments")
    common(e)
    e.add_argument("--mode", choices=EVAL_MODES)
    e.add_argument("--data", help="manifest.json written by synth")
    e.add_argument("--methods", nargs="+")
    e.add_argument("--weights")
    e.add_argument("--n-keypoints", type=int, dest="n_keypoints")
    e.add_argument("--iterations", type=int)
    e.add_argument("--correspondences", choices=("descriptor", "gt"))

    i = sub.add_parser("info", help="describe a weight file")
    i.add_argument("weights")
    return p


_OWN_ARGS = {"command", "config", "out", "verbose"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "info":
            print(cmd_info(args.weights))
            return EXIT_OK
        overrides = {k: v for k, v in vars(args).items() if k not in _OWN_ARGS}
        defaults = {"synth": SYNTH_DEFAULTS, "train": TRAIN_DEFAULTS, "eval": EVAL_DEFAULTS}[args.command]
        cfg = resolve_config(defaults, args.config, overrides)
        out = output_dir(args.out)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        else:
            cmd_eval(cfg, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDivergedError, PoseFailureError, DegenerateGeometryError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ChecksumError, InvalidInputError, InsufficientDataError, EmptyPatchError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (TypeError, ValueError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except LrfError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
