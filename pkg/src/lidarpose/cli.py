"""Command-line harness: generate, train, eval, ablate.

Configuration is flat key-value text; every key has a matching CLI flag and
flags win over file values.  The fully resolved configuration is written to
<out>/run_config.txt before anything else happens, so any run can be
reproduced from that file alone (pass it back via --config).

Exit codes: 0 success, 2 configuration error (bad keys, bad values),
3 runtime failure (missing inputs, divergence, cell crashes).

HPERL_THREADS caps ablation worker processes (default 1, serial).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np

from .evalkit import (
    MetricReport,
    compute_metrics,
    format_table_row,
    integrate_proposals,
    write_predictions,
    write_report,
)
from .model import (
    ModelConfig,
    PoseNet,
    desk_recipe,
    fusion_recipe,
    prepare_scene,
    rgb_baseline_recipe,
)
from .synthgen import (
    GenConfig,
    Scene,
    generate_dataset,
    read_dataset,
    read_manifest,
    write_dataset,
)
from .training import (
    TrainingDivergedError,
    fit,
    load_checkpoint,
    prepare_train_scene,
    save_checkpoint,
    Optimizer,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Key table: name -> (parse, format).  Flags mirror keys one-to-one.
# ---------------------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


_PARSERS = {int: int, float: float, str: str, bool: _parse_bool, tuple: _parse_floats}


def _keys_from_dataclass(cls) -> dict[str, type]:
    keys = {}
    for f in dataclass_fields(cls):
        default = getattr(cls, f.name, f.default)
        keys[f.name] = type(default)
    return keys


GEN_KEYS = _keys_from_dataclass(GenConfig)
MODEL_KEYS = _keys_from_dataclass(ModelConfig)

TRAIN_EXTRA = {"dataset": str, "preset": str, "checkpoint_every": int, "resume": str,
               "stop_after_epoch": int}
EVAL_EXTRA = {"dataset": str, "checkpoint": str, "split": str, "preset": str}
ABLATE_EXTRA = {"dataset": str, "preset": str}

COMMAND_KEYS = {
    "generate": dict(GEN_KEYS),
    "train": {**MODEL_KEYS, **TRAIN_EXTRA},
    "eval": {**MODEL_KEYS, **EVAL_EXTRA},
    "ablate": {**MODEL_KEYS, **ABLATE_EXTRA},
}

PRESETS = {"desk": desk_recipe, "fusion": fusion_recipe, "rgb_baseline": rgb_baseline_recipe}


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    return values


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- flags into typed values."""
    keys = COMMAND_KEYS[command]
    raw: dict[str, str] = {}
    if args.config:
        for key, val in _read_config_file(args.config).items():
            if key in keys:
                raw[key] = val
            # foreign keys (another command's) are allowed so one resolved
            # file can drive the whole pipeline
    for key in keys:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            raw[key] = flag_val
    if args.seed is not None:
        raw["seed"] = str(args.seed)

    values: dict = {}
    for key, typ in keys.items():
        if key in raw:
            try:
                values[key] = _PARSERS[typ](raw[key])
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})")
    values["_provided"] = frozenset(values.keys())
    return values


def _model_config(values: dict) -> ModelConfig:
    provided = values["_provided"]
    preset = values.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choices: {sorted(PRESETS)}")
        base = PRESETS[preset]()
    else:
        base = ModelConfig()
    overrides = {k: values[k] for k in MODEL_KEYS if k in provided and k in values}
    try:
        return dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _gen_config(values: dict) -> GenConfig:
    kwargs = {k: values[k] for k in GEN_KEYS if k in values}
    try:
        return GenConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc))


def write_run_config(out: str, command: str, values: dict) -> None:
    os.makedirs(out, exist_ok=True)
    lines = [f"command={command}"]
    for key in sorted(k for k in values if not k.startswith("_")):
        lines.append(f"{key}={_fmt(values[key])}")
    with open(os.path.join(out, "run_config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Shared pipeline helpers (also used by the test suite)
# ---------------------------------------------------------------------------

def build_train_scenes(config: ModelConfig, scenes: list[Scene]):
    return [
        prepare_train_scene(
            config, s.camera, s.image, s.cloud,
            [g.box_3d for g in s.gt],
            [g.box_2d for g in s.gt],
            [g.skel_2d for g in s.gt],
        )
        for s in scenes
    ]


def predict_scene(model: PoseNet, scene: Scene):
    prepared = prepare_scene(model.config, scene.camera, scene.image, scene.cloud)
    detections, _ = model.forward(prepared)
    return integrate_proposals(detections)


def evaluate_model(model: PoseNet, scenes: list[Scene]):
    """Returns (MetricReport, [(scene_id, [FinalPose])])."""
    scene_predictions = [(s.scene_id, predict_scene(model, s)) for s in scenes]
    per_scene = [(preds, scene.gt) for (_, preds), scene in zip(scene_predictions, scenes)]
    report = compute_metrics(per_scene)
    return report, scene_predictions


def split_scenes(directory: str, split: str) -> list[Scene]:
    manifest, scenes = read_dataset(directory)
    if split == "all":
        return scenes
    if split not in manifest.splits:
        raise ConfigError(f"unknown split {split!r}; available: {sorted(manifest.splits)}")
    wanted = set(manifest.splits[split])
    return [s for s in scenes if s.scene_id in wanted]


def _epoch_means(history, steps_per_epoch: int):
    """Collapse per-step rows into per-epoch mean rows."""
    rows = []
    for e0 in range(0, len(history), steps_per_epoch):
        chunk = np.array(history[e0:e0 + steps_per_epoch])
        epoch = e0 // steps_per_epoch
        means = chunk[:, 2:].mean(axis=0)
        rows.append((epoch, chunk[0, 1], *means))
    return rows


def _write_loss_log(path, epoch_rows) -> None:
    lines = ["epoch,lr,l_rpn_obj,l_rpn_reg,l_cls,l_2d,l_3d,l_total"]
    for row in epoch_rows:
        epoch = int(row[0])
        lines.append(str(epoch) + "," + ",".join(repr(float(v)) for v in row[1:]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(values: dict, out: str) -> int:
    from .synthgen import body_point_count

    config = _gen_config(values)
    manifest, scenes = generate_dataset(config)
    write_dataset(out, manifest, scenes)
    n_ped = sum(len(s.gt) for s in scenes)
    body_pts = sum(body_point_count(s) for s in scenes)
    mean_pts = body_pts / n_ped if n_ped else 0.0
    print(
        f"generated {manifest.scene_count} scenes, {n_ped} pedestrians, "
        f"{mean_pts:.1f} points/pedestrian -> {out}"
    )
    return EXIT_OK


def cmd_train(values: dict, out: str) -> int:
    dataset = values.get("dataset", "")
    if not dataset or not os.path.isfile(os.path.join(dataset, "manifest.txt")):
        print(f"error: dataset not found at {dataset!r}", file=sys.stderr)
        return EXIT_RUNTIME
    config = _model_config(values)
    train_scenes = split_scenes(dataset, "train")
    prepared = build_train_scenes(config, train_scenes)
    model = PoseNet(config)
    checkpoint_path = os.path.join(out, "checkpoint.blob")
    best_path = os.path.join(out, "checkpoint_best.blob")
    resume = values.get("resume", "") or None
    stop_after = values.get("stop_after_epoch", -1)
    try:
        history = fit(
            model, prepared,
            checkpoint_path=checkpoint_path,
            checkpoint_every=values.get("checkpoint_every", 0),
            resume_from=resume,
            stop_after_epoch=None if stop_after < 0 else stop_after,
            best_path=best_path,
        )
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not history:
        # epochs=0: still leave a usable initial checkpoint behind
        optimizer = Optimizer(config.optimizer, model.params)
        rng = np.random.default_rng(config.seed + 1)
        save_checkpoint(checkpoint_path, model, optimizer, rng, 0, [])
        save_checkpoint(best_path, model, optimizer, rng, 0, [])
    steps_per_epoch = max(1, -(-len(train_scenes) // config.batch_size))
    epoch_rows = _epoch_means(history, steps_per_epoch)
    _write_loss_log(os.path.join(out, "loss_log.csv"), epoch_rows)
    if epoch_rows:
        last = epoch_rows[-1]
        print(
            f"trained {len(epoch_rows)} epochs on {len(train_scenes)} scenes; "
            f"final l_total={last[-1]:.4f} -> {checkpoint_path}"
        )
    else:
        print(f"wrote initial checkpoint (epochs=0) -> {checkpoint_path}")
    return EXIT_OK


def _load_model(values: dict, checkpoint: str) -> PoseNet:
    config = _model_config(values)
    model = PoseNet(config)
    optimizer = Optimizer(config.optimizer, model.params)
    load_checkpoint(checkpoint, model, optimizer)
    return model


def cmd_eval(values: dict, out: str) -> int:
    dataset = values.get("dataset", "")
    checkpoint = values.get("checkpoint", "")
    if not dataset or not os.path.isfile(os.path.join(dataset, "manifest.txt")):
        print(f"error: dataset not found at {dataset!r}", file=sys.stderr)
        return EXIT_RUNTIME
    if not checkpoint or not os.path.isfile(checkpoint):
        print(f"error: checkpoint not found at {checkpoint!r}", file=sys.stderr)
        return EXIT_RUNTIME
    model = _load_model(values, checkpoint)
    scenes = split_scenes(dataset, values.get("split", "val"))
    report, scene_predictions = evaluate_model(model, scenes)
    write_predictions(os.path.join(out, "predictions.csv"), scene_predictions)
    write_report(os.path.join(out, "report.csv"), report)
    print(format_table_row(f"{model.config.mode}/{model.config.fusion}/{model.config.roi_op}", report))
    return EXIT_OK


ABLATION_AXES = (
    ("mode", ("rgb+lidar", "rgb")),
    ("fusion", ("concat", "mean")),
    ("roi_op", ("align", "pool")),
    ("flip_augment", (True, False)),
)


def run_ablation_cell(values: dict, out: str, cell: dict) -> dict:
    """Train + eval one grid cell; returns a result row dict."""
    cell_dir = os.path.join(
        out,
        "cell_{mode}_{fusion}_{roi_op}_{flip}".format(
            mode=cell["mode"].replace("+", ""), fusion=cell["fusion"],
            roi_op=cell["roi_op"], flip="flip" if cell["flip_augment"] else "noflip",
        ),
    )
    os.makedirs(cell_dir, exist_ok=True)
    cell_values = dict(values)
    cell_values.update(cell)
    cell_values["_provided"] = values["_provided"] | set(cell.keys())
    config = _model_config(cell_values)
    dataset = values["dataset"]
    train_scenes = split_scenes(dataset, "train")
    prepared = build_train_scenes(config, train_scenes)
    model = PoseNet(config)
    fit(model, prepared, checkpoint_path=os.path.join(cell_dir, "checkpoint.blob"))
    report, _ = evaluate_model(model, split_scenes(dataset, "val"))
    return {
        "mode": cell["mode"], "fusion": cell["fusion"], "roi_op": cell["roi_op"],
        "flip_augment": cell["flip_augment"], "status": "ok",
        "report": report, "message": "",
    }


def _ablation_row(result: dict) -> str:
    rep = result.get("report")
    metrics = (
        f"{rep.mpjpe_2d:.6f},{rep.pckh:.6f},{rep.cde:.6f},{rep.xye:.6f},{rep.n_matched}"
        if rep is not None
        else ",,,,"
    )
    return (
        f"{result['mode']},{result['fusion']},{result['roi_op']},"
        f"{_fmt(result['flip_augment'])},{result['status']},{metrics},"
        f"{result['message']}"
    )


def cmd_ablate(values: dict, out: str) -> int:
    dataset = values.get("dataset", "")
    if not dataset or not os.path.isfile(os.path.join(dataset, "manifest.txt")):
        print(f"error: dataset not found at {dataset!r}", file=sys.stderr)
        return EXIT_RUNTIME
    cells = []
    for mode in ABLATION_AXES[0][1]:
        for fusion in ABLATION_AXES[1][1]:
            for roi_op in ABLATION_AXES[2][1]:
                for flip in ABLATION_AXES[3][1]:
                    cells.append(
                        {"mode": mode, "fusion": fusion, "roi_op": roi_op, "flip_augment": flip}
                    )
    workers = max(1, int(os.environ.get("HPERL_THREADS", "1")))
    results = []
    if workers > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_ablation_cell, values, out, cell) for cell in cells]
            for cell, fut in zip(cells, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # cell failures recorded, sweep continues
                    results.append({**cell, "status": "failed", "report": None,
                                    "message": repr(exc)})
    else:
        for cell in cells:
            try:
                results.append(run_ablation_cell(values, out, cell))
            except Exception as exc:
                results.append({**cell, "status": "failed", "report": None,
                                "message": repr(exc)})
    lines = ["mode,fusion,roi_op,flip_augment,status,mpjpe_2d,pckh,cde,xye,n_matched,message"]
    lines += [_ablation_row(r) for r in results]
    table_path = os.path.join(out, "ablation.csv")
    with open(table_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    n_failed = sum(1 for r in results if r["status"] != "ok")
    print(f"ablation: {len(results)} cells, {n_failed} failed -> {table_path}")
    for r in results:
        if r["report"] is not None:
            label = f"{r['mode']}/{r['fusion']}/{r['roi_op']}/" + (
                "flip" if r["flip_augment"] else "noflip"
            )
            print(format_table_row(label, r["report"]))
    return EXIT_OK if n_failed == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarpose",
        description="Two-stage RGB+LiDAR multi-person absolute 3D pose pipeline.",
        epilog="exit codes: 0 ok, 2 config error, 3 runtime failure",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMAND_KEYS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default="", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed key")
        p.add_argument("--out", required=True, help="output directory")
        for key in keys:
            if key == "seed":
                continue  # covered by the global --seed flag
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve_config(args.command, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_run_config(args.out, args.command, values)
    handler = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
    }[args.command]
    try:
        return handler(values, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
