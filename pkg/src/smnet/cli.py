"""``smnet`` command line: gen, preprocess, train, eval, infer, complexity.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes ``run.json`` into its output directory once the
configuration has been resolved, including on failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud_io import CloudFormatError, read_cloud, write_cloud
from .metrics import (ANALYTIC_SURFACES, MetricError, analytic_surface, build_error_map,
                      chamfer_distance, complexity_from_cloud, distance_stddev, hausdorff_distance,
                      surface_complexity)
from .model import VARIANTS, ConfigError, PRESETS, SMNet, SMNetConfig, preset_config
from .params import CheckpointError
from .pointcloud import PointCloudError, TransformRecord
from .preprocess import PreprocessParams, already_processed, clean, preprocess_cloud
from .simulators import (CELLS_PER_SIDE, MECHANISMS, default_shared_cells, TOPOLOGIES, SimulationError, SurrogateSpec, generate_dataset,
                         load_manifest, make_layout, manifest_spec, simulate, write_manifest)
from .training import (SampleSet, TrainConfig, TrainingDiverged, evaluate, predict_control, train,
                       write_history)
from .cloud_io import write_pcd1

log = logging.getLogger("smnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMPLEXITY_GRID = 8     # per-face grid for complexity of 512-point clouds


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


DATA_ERRORS = (DataError, FileNotFoundError, CloudFormatError, SimulationError, PointCloudError,
               CheckpointError, ConfigError, MetricError, json.JSONDecodeError, KeyError)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects resolved config, artifacts and status for ``run.json``."""

    def __init__(self, command: str, out_dir, config: dict):
        self.command = command
        self.out = Path(out_dir)
        self.config = config
        self.artifacts: list[Path] = []
        self.result: dict = {}
        self.t0 = time.perf_counter()

    def add(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(path)
        return path

    def write(self, status: str, code: int, error: Optional[str] = None) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": self.command,
            "config": self.config,
            "status": status,
            "exit_code": code,
            "error": error,
            "result": self.result,
            "artifacts": {str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p): file_hash(p)
                          for p in self.artifacts if p.is_file()},
            "elapsed_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset helpers


def _load_processed(data) -> dict:
    manifest = load_manifest(data)
    if manifest.get("stage") != "processed":
        raise DataError(f"{data}: manifest is not preprocessed (stage {manifest.get('stage')!r}); "
                        f"run 'smnet preprocess' first")
    return manifest


def sample_set(manifest: dict, split: str) -> SampleSet:
    root = Path(manifest["_root"])
    by_id = {s["id"]: s for s in manifest["samples"]}
    ids = manifest["split"][split]
    clouds = [read_cloud(root / by_id[i]["file"]).points for i in ids]
    controls = np.array([by_id[i]["control"] for i in ids], dtype=np.float64)
    controls = controls.reshape(len(ids), manifest["layout"]["control_dim"])
    return SampleSet(list(ids), clouds, controls)


def _pipeline_path(ckpt) -> Path:
    return Path(ckpt).with_name("pipeline.json")


def _load_model(ckpt) -> SMNet:
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return SMNet.load(ckpt)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, run: Run) -> int:
    spec = SurrogateSpec.for_mechanism(args.mechanism, args.topology)
    shared = args.shared_cells
    if shared is None:
        shared = default_shared_cells(args.mechanism, args.topology)
    layout = make_layout(args.topology, shared)
    manifest = generate_dataset(args.samples, spec, layout, args.density, args.seed, run.out,
                                n_test=args.n_test)
    run.add(run.out / "manifest.json")
    for s in manifest["samples"]:
        run.add(run.out / s["file"])
    run.result = {"control_dim": layout.control_dim, "density": manifest["density"],
                  "spec_hash": manifest["spec_hash"], "samples": len(manifest["samples"])}
    print(run.out / "manifest.json")
    print(f"samples {len(manifest['samples'])}  control_dim {layout.control_dim}  "
          f"density {manifest['density']}  spec_hash {manifest['spec_hash']}")
    return EXIT_OK


def cmd_preprocess(args, run: Run) -> int:
    manifest = load_manifest(args.input)
    root = Path(manifest["_root"])
    out = run.out
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    samples = manifest["samples"]
    raw = [read_cloud(root / s["file"]) for s in samples]
    n_points = args.n_points
    counts = {}
    for s, cloud in zip(samples, raw):
        counts[s["id"]] = len(cloud) if (n_points and already_processed(cloud, n_points)) \
            else len(clean(cloud, args.cell))
    if n_points is None:
        if not counts:
            raise DataError("cannot infer --n-points from an empty dataset")
        n_points = min(counts.values())
        print(f"n_points {n_points} (smallest post-voxel count)")
    short = [i for i, c in counts.items() if c < n_points]
    if short:
        listed = ", ".join(f"{i} ({counts[i]})" for i in short[:20])
        raise DataError(f"{len(short)} samples have fewer than {n_points} points after cleaning: "
                        f"{listed}{' ...' if len(short) > 20 else ''}")
    params = PreprocessParams(n_points, args.cell)
    run.config["resolved_n_points"] = n_points
    new_samples = []
    for s, cloud in zip(samples, raw):
        processed, record = preprocess_cloud(cloud, params, seed=s["seed"])
        if "transform" in s and already_processed(cloud, n_points):
            record = TransformRecord.from_dict(s["transform"])
        rel = f"clouds/{s['id']:06d}.pcd"
        write_pcd1(out / rel, processed.points)
        run.add(out / rel)
        new_samples.append({**s, "file": rel, "transform": record.to_dict()})
    result = {k: v for k, v in manifest.items() if k != "_root"}
    result.update(stage="processed", samples=new_samples, preprocess=params.to_dict())
    write_manifest(out / "manifest.json", result)
    run.add(out / "manifest.json")
    run.result = {"n_points": n_points, "samples": len(new_samples)}
    print(out / "manifest.json")
    return EXIT_OK


def _model_config(args, manifest: dict) -> SMNetConfig:
    overrides = dict(out_dim=manifest["layout"]["control_dim"], n_points=manifest["preprocess"]["n_points"],
                     variant=args.variant, seed=args.seed)
    if args.config:
        cfg = SMNetConfig.load(args.config)
        kw = {**cfg.__dict__, **overrides}
        return SMNetConfig(**kw)
    return preset_config(args.preset, **overrides)


def cmd_train(args, run: Run) -> int:
    manifest = _load_processed(args.data)
    cfg = _model_config(args, manifest)
    tcfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                       seed=args.seed, checkpoint_every=args.checkpoint_every)
    run.config.update(model=cfg.__dict__ | {}, train=tcfg.__dict__)
    train_set, test_set = sample_set(manifest, "train"), sample_set(manifest, "test")
    model = SMNet(cfg)
    out = run.out
    history = []
    try:
        history = train(model, train_set, tcfg, test_set if len(test_set) else None, checkpoint_dir=out,
                        on_epoch=lambda r: print(json.dumps(r), flush=True))
    finally:
        write_history(out / "history.csv", history)
        run.add(out / "history.csv")
    ckpt = out / "model.smn"
    model.save(ckpt)
    run.add(ckpt)
    run.add(ckpt.with_suffix(".cfg"))
    write_json(_pipeline_path(ckpt), {"spec": manifest["spec"], "layout": manifest["layout"],
                                      "density": manifest["density"], "preprocess": manifest["preprocess"]})
    run.add(_pipeline_path(ckpt))
    for p in sorted(out.glob("checkpoint_epoch*.smn")):
        run.add(p)
    if len(test_set):
        rep = evaluate(model, test_set)
        metrics = rep.to_dict()
        metrics["per_dimension_mae"] = rep.per_dimension_mae.tolist()
        write_json(out / "metrics.json", metrics)
        run.add(out / "metrics.json")
        run.result = rep.to_dict()
        print(f"test mse {rep.mse:.6f}  mae {rep.mae:.6f}  r2 {rep.r2:.6f}")
    return EXIT_OK


def replay_errors(manifest: dict, ids, predictions, signed: bool = False):
    """Re-simulate clamped predictions with each sample's own seed and compare point-by-point.

    Returns (shape metrics averaged over samples, reference points, per-point errors).
    """
    spec, layout = manifest_spec(manifest)
    by_id = {s["id"]: s for s in manifest["samples"]}
    acc = {"chamfer": [], "stddev": [], "hausdorff": [], "complexity_target": [], "complexity_replay": []}
    refs, errs = [], []
    for i, pred in zip(ids, predictions):
        s = by_id[i]
        truth = simulate(s["control"], spec, layout, manifest["density"], s["seed"])
        rep = simulate(np.clip(pred, -1, 1), spec, layout, manifest["density"], s["seed"])
        # same seed, same reference samples: the error is the per-point displacement difference
        diff = rep.points - truth.points
        d = np.linalg.norm(diff, axis=1)
        if signed:
            d = d * np.sign((diff * (truth.points - truth.reference_points)).sum(axis=1) + 0.0)
        refs.append(truth.reference_points)
        errs.append(d)
        acc["chamfer"].append(chamfer_distance(truth, rep))
        acc["stddev"].append(distance_stddev(truth, rep))
        acc["hausdorff"].append(hausdorff_distance(truth, rep))
        for key, c in (("complexity_target", truth), ("complexity_replay", rep)):
            try:
                acc[key].append(complexity_from_cloud(c, layout.topology, n=COMPLEXITY_GRID))
            except MetricError:
                pass
    summary = {k: (float(np.mean(v)) if v else None) for k, v in acc.items()}
    return summary, np.concatenate(refs), np.concatenate(errs), layout


def actuator_grid(values: np.ndarray, layout) -> Optional[np.ndarray]:
    """Per-actuator values on the 6x6 plate grid (None for cube layouts)."""
    if layout.topology != "plate":
        return None
    n = CELLS_PER_SIDE
    return np.asarray(values).reshape(n, n)


def cmd_eval(args, run: Run) -> int:
    model = _load_model(args.model)
    if model.config.variant != args.ablation:
        raise DataError(f"checkpoint holds a {model.config.variant!r} model, --ablation asked for "
                        f"{args.ablation!r}")
    manifest = _load_processed(args.data)
    dim = manifest["layout"]["control_dim"]
    if model.config.out_dim != dim:
        raise CheckpointError(f"architecture mismatch: model predicts {model.config.out_dim} controls, "
                              f"dataset has {dim}")
    if model.config.n_points != manifest["preprocess"]["n_points"]:
        raise CheckpointError(f"architecture mismatch: model expects {model.config.n_points} points, "
                              f"dataset has {manifest['preprocess']['n_points']}")
    test_set = sample_set(manifest, args.split)
    rep = evaluate(model, test_set, per_dimension_r2=args.per_dimension_r2)
    out = run.out
    shape, refs, errs, layout = replay_errors(manifest, test_set.ids, rep.predictions, args.signed)
    metrics = {**rep.to_dict(), "chamfer": shape["chamfer"], "stddev": shape["stddev"],
               "hausdorff": shape["hausdorff"],
               "complexity": {"target": shape["complexity_target"], "replay": shape["complexity_replay"]},
               "r2_mode": "per-dimension" if args.per_dimension_r2 else "pooled"}
    write_json(out / "metrics.json", metrics)
    with open(out / "per_dimension_error.csv", "w") as fh:
        fh.write("dimension,mae\n")
        for j, v in enumerate(rep.per_dimension_mae):
            fh.write(f"{j},{v!r}\n")
    np.savetxt(out / "predictions.csv", rep.predictions, delimiter=",", fmt="%.9g")
    paths = [out / "metrics.json", out / "per_dimension_error.csv", out / "predictions.csv"]
    grid = actuator_grid(rep.per_dimension_mae, layout)
    if grid is not None:
        np.savetxt(out / "errmap_actuators.csv", grid, delimiter=",", fmt="%.9g")
        paths.append(out / "errmap_actuators.csv")
    h = layout.half_size
    bounds = ((-h, -h, -h), (h, h, h))
    emap = build_error_map(refs, errs, layout.topology, bounds=bounds, signed=args.signed)
    paths += emap.write_csv(out)
    for p in paths:
        run.add(p)
    run.result = metrics
    print(f"test mse {rep.mse:.6f}  mae {rep.mae:.6f}  r2 {rep.r2:.6f}  chamfer {shape['chamfer']:.3g}")
    return EXIT_OK


def cmd_infer(args, run: Run) -> int:
    model = _load_model(args.model)
    pipe_path = _pipeline_path(args.model)
    if not pipe_path.is_file():
        raise FileNotFoundError(f"pipeline description not found next to checkpoint: {pipe_path}")
    pipe = json.loads(pipe_path.read_text())
    pp = pipe["preprocess"]
    params = PreprocessParams(pp["n_points"], pp["cell_size"], pp.get("interior_cell"), pp.get("align", True))
    target = read_cloud(args.target)
    t0 = time.perf_counter()
    pred, record, processed = predict_control(model, target, params, seed=args.seed)
    seconds = time.perf_counter() - t0
    clamped = np.clip(pred, -1, 1)
    out = run.out
    result = {"control": pred.tolist(), "control_clamped": clamped.tolist(),
              "max_abs_control": float(np.abs(pred).max()), "transform": record.to_dict(),
              "predict_seconds": seconds}
    if args.replay:
        spec = SurrogateSpec(**pipe["spec"])
        layout = make_layout(pipe["layout"]["topology"], pipe["layout"]["shared_cells"])
        raw_replay = simulate(clamped, spec, layout, pipe["density"], args.seed)
        replay, _ = preprocess_cloud(raw_replay, params, seed=args.seed)
        write_cloud(out / "replay.pcd", replay.points)
        write_cloud(out / "target_processed.pcd", processed.points)
        run.add(out / "replay.pcd")
        run.add(out / "target_processed.pcd")
        shape = {"chamfer": chamfer_distance(processed, replay),
                 "stddev": distance_stddev(processed, replay),
                 "hausdorff": hausdorff_distance(processed, replay)}
        for key, c in (("target", processed), ("replay", replay)):
            try:
                shape[f"complexity_{key}"] = complexity_from_cloud(c, layout.topology, n=COMPLEXITY_GRID)
            except MetricError as exc:
                shape[f"complexity_{key}"] = None
                log.warning("complexity of %s cloud unavailable: %s", key, exc)
        result["replay"] = shape
        write_json(out / "metrics.json", shape)
        run.add(out / "metrics.json")
    write_json(out / "prediction.json", result)
    run.add(out / "prediction.json")
    run.result = {k: v for k, v in result.items() if k not in ("control", "control_clamped")}
    print(json.dumps({"max_abs_control": result["max_abs_control"], "predict_seconds": round(seconds, 3),
                      **result.get("replay", {})}))
    return EXIT_OK


def cmd_complexity(args, run: Run) -> int:
    if (args.input is None) == (args.surface is None):
        raise UsageError("give exactly one of --in FILE or --surface NAME")
    if args.surface is not None:
        value = surface_complexity(analytic_surface(args.surface, n=args.grid))
    else:
        value = complexity_from_cloud(read_cloud(args.input), args.faces, n=args.grid)
    run.result = {"complexity": value}
    print(repr(value))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smnet", description="Point-cloud to control-vector inverse models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="simulate a synthetic dataset")
    g.add_argument("--mechanism", choices=MECHANISMS, required=True)
    g.add_argument("--topology", choices=TOPOLOGIES, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--density", type=int, default=None, help="samples per face side")
    g.add_argument("--n-test", type=int, default=None, help="test split size (default 2%%)")
    cells = g.add_mutually_exclusive_group()
    cells.add_argument("--shared-cells", dest="shared_cells", action="store_true", default=None,
                       help="cube: one control per surface unit cube (152)")
    cells.add_argument("--per-face", dest="shared_cells", action="store_false",
                       help="cube: one control per face cell (216)")
    g.add_argument("--out", required=True)

    q = sub.add_parser("preprocess", help="clean, downsample and normalize a dataset")
    q.add_argument("--in", dest="input", required=True, help="manifest file or dataset directory")
    q.add_argument("--n-points", type=int, default=None)
    q.add_argument("--cell", type=float, default=0.25, help="voxel cell size in raw units")
    q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a preprocessed dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--config", default=None, help="model config file (overrides --preset)")
    t.add_argument("--variant", choices=VARIANTS, default="smnet")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ablation", choices=VARIANTS, default="smnet")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--per-dimension-r2", action="store_true")
    e.add_argument("--signed", action="store_true", help="signed instead of absolute error maps")
    e.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="predict the control reproducing a target cloud")
    i.add_argument("--model", required=True)
    i.add_argument("--target", required=True)
    i.add_argument("--replay", action="store_true")
    i.add_argument("--seed", type=int, default=0, help="downsampling and replay sampling seed")
    i.add_argument("--out", required=True)

    c = sub.add_parser("complexity", help="surface complexity of a cloud or analytic surface")
    c.add_argument("--in", dest="input", default=None)
    c.add_argument("--surface", default=None, help=f"one of {', '.join(ANALYTIC_SURFACES)} (wavy:k)")
    c.add_argument("--grid", type=int, default=32)
    c.add_argument("--faces", choices=("plate", "cube"), default="plate")
    c.add_argument("--out", default=".")
    return p


COMMANDS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "complexity": cmd_complexity}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"smnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {k: v for k, v in vars(args).items() if k != "verbose"}
    run = Run(args.command, args.out, config)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, run)
        run.write("ok", code)
        return code
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except (TrainingDiverged, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except DATA_ERRORS as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except ValueError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except OSError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"smnet: {msg}", file=sys.stderr)
    run.write("failed", code, msg)
    return code


if __name__ == "__main__":
    sys.exit(main())
