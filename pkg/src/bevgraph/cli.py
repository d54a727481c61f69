"""Operator entry point: datasets, training, evaluation, ablations,
gradient checks, and report plots.

Every command takes an optional JSON config file plus dotted-path
overrides, and drops a manifest into each output directory so the run
can be reproduced from that file alone. Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 gradient check above threshold.
"""

import argparse
import copy
import json
import os
import subprocess
import sys
from dataclasses import asdict

from . import __version__
from . import autodiff as ad
from . import evalharness
from . import gradcheck as gradcheck_mod
from . import sim as sim_mod
from . import training
from .propagation import PropagationConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

DEGREE_LEVELS = (0, 1, 2, 3, 10, 20)


class ConfigError(Exception):
    """Bad flags, missing files, or invalid config values."""


def build_id():
    """Package version plus the git commit when run from a checkout."""
    root = os.path.dirname(os.path.dirname(os.path.dirname(__file__)))
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=root,
            capture_output=True, text=True, timeout=5)
        if described.returncode == 0:
            return f"bevgraph-{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"bevgraph-{__version__}"


def thread_cap():
    """Worker-count ceiling from BEVGRAPH_THREADS; all commands run
    single-process today, so the cap is recorded and trivially met."""
    raw = os.environ.get("BEVGRAPH_THREADS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"BEVGRAPH_THREADS must be an integer, "
                          f"got {raw!r}")
    if value < 1:
        raise ConfigError(f"BEVGRAPH_THREADS must be >= 1, got {value}")
    return value


def write_manifest(out_dir, command, config_path, seed, resolved,
                   overrides):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": config_path or "",
        "seed": seed,
        "out_dir": os.path.abspath(out_dir),
        "build": build_id(),
        "threads": thread_cap(),
        "overrides": list(overrides),
        "resolved_config": resolved,
    }
    evalharness.write_json(os.path.join(out_dir, "manifest.json"), manifest)


def load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def merge_into(base, update):
    """Recursive dict merge; scalar and list values replace."""
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            merge_into(base[key], value)
        else:
            base[key] = value
    return base


def apply_overrides(config, sets):
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs dotted.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"--set needs a key before '=': {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = value
    return config


def resolve(defaults, config_path, sets):
    resolved = copy.deepcopy(defaults)
    merge_into(resolved, load_config_file(config_path))
    apply_overrides(resolved, sets)
    return resolved


def make_typed(builder, doc, what):
    try:
        return builder(doc)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {what}: {exc}")


# ---------------------------------------------------------------------------
# per-command defaults (shown in --help, overridable via file and --set)


def simulate_defaults():
    return {"sim": sim_mod._config_dict(sim_mod.SimConfig()),
            "n_train": 2000, "n_val": 500}


def train_defaults():
    return {"train": training.train_config_to_dict(training.TrainConfig()),
            "dataset_dir": ""}


def eval_defaults():
    return {"checkpoint": "", "dataset_dir": "", "split": "val",
            "binned": True, "bin_edges": [0, 10, 20, 30, 40, 50]}


def ablate_defaults():
    return {"axis": "propagation_mode", "levels": [], "seeds": [1, 2, 3],
            "train": training.train_config_to_dict(training.TrainConfig()),
            "dataset_dir": ""}


def gradcheck_defaults():
    return {"draws": 20, "eps": 1e-6,
            "threshold": gradcheck_mod.DEFAULT_THRESHOLD, "seed": 0,
            "propagation": asdict(PropagationConfig())}


def report_defaults():
    return {"ablation_summary": "", "binned_metrics": []}


# ---------------------------------------------------------------------------
# commands


def _load_dataset(doc):
    path = doc.get("dataset_dir")
    if not path:
        raise ConfigError("dataset_dir is required (simulate writes one)")
    try:
        return training.SceneDataset.from_dir(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load dataset from {path}: {exc}")


def cmd_simulate(args):
    resolved = resolve(simulate_defaults(), args.config, args.set)
    if args.seed is not None:
        resolved["sim"]["seed"] = args.seed
    if args.out is None:
        raise ConfigError("simulate needs --out for the dataset files")
    sim_config = make_typed(sim_mod.config_from_dict, resolved["sim"],
                            "simulator config")
    n_train, n_val = resolved["n_train"], resolved["n_val"]
    if n_train < 1 or n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")

    write_manifest(args.out, "simulate", args.config, sim_config.seed,
                   resolved, args.set)
    for split, count, base in (("train", n_train, 0),
                               ("val", n_val, 1_000_000)):
        scenes = [
            sim_mod.sample_scene(
                sim_config, sim_mod.scene_rng(sim_config.seed, split, i),
                scene_id=base + i)
            for i in range(count)]
        path = os.path.join(args.out, f"{split}.json.gz")
        sim_mod.save_split(path, sim_config, split, scenes)
        objects = sum(s.num_objects for s in scenes)
        print(f"{split}: {count} scenes, {objects} objects -> {path}")
    return EXIT_OK


def cmd_train(args):
    resolved = resolve(train_defaults(), args.config, args.set)
    if args.seed is not None:
        resolved["train"]["seed"] = args.seed
    config = make_typed(training.train_config_from_dict, resolved["train"],
                        "training config")
    dataset = _load_dataset(resolved)
    if args.out is not None:
        write_manifest(args.out, "train", args.config, config.seed,
                       resolved, args.set)
    try:
        record = training.train(dataset, config, out_dir=args.out)
    except training.TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {config.epochs} epochs in {record.wall_clock:.1f}s")
    print(f"final val: loc_error {record.final_val_loc_error:.4f} m, "
          f"iou {record.final_val_iou:.4f}")
    if record.checkpoint_path:
        print(f"checkpoint: {record.checkpoint_path}")
    return EXIT_OK


def _binned_rows(binned):
    return [{"bin_lo": lo, "bin_hi": hi, "iou": stats["iou"],
             "loc_error": stats["loc_error"], "count": stats["count"]}
            for (lo, hi), stats in sorted(binned.items())]


def cmd_eval(args):
    resolved = resolve(eval_defaults(), args.config, args.set)
    if not resolved["checkpoint"]:
        raise ConfigError("checkpoint is required (train writes one)")
    if resolved["split"] not in ("train", "val"):
        raise ConfigError(f"split must be train or val, "
                          f"got {resolved['split']!r}")
    try:
        store, config, sim_config = training.load_checkpoint(
            resolved["checkpoint"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint "
                          f"{resolved['checkpoint']}: {exc}")
    dataset = _load_dataset(resolved)
    if dataset.sim_config != sim_config:
        raise ConfigError("dataset was generated with a different "
                          "simulator config than the checkpoint")
    scenes = getattr(dataset, resolved["split"])
    try:
        metrics = training.evaluate(store, config, sim_config, scenes,
                                    binned=resolved["binned"],
                                    bin_edges=tuple(resolved["bin_edges"]))
    except ad.NonFiniteError as exc:
        print(f"evaluation produced non-finite values: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC

    doc = {k: v for k, v in metrics.items() if k != "binned"}
    doc["per_class_iou"] = {str(k): v
                            for k, v in metrics["per_class_iou"].items()}
    if "binned" in metrics:
        doc["binned"] = _binned_rows(metrics["binned"])
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out is not None:
        write_manifest(args.out, "eval", args.config,
                       args.seed if args.seed is not None else config.seed,
                       resolved, args.set)
        evalharness.write_json(os.path.join(args.out, "metrics.json"), doc)
        if "binned" in doc and doc["binned"]:
            evalharness.write_csv(os.path.join(args.out, "metrics.csv"),
                                  doc["binned"])
    return EXIT_OK


def cmd_ablate(args):
    resolved = resolve(ablate_defaults(), args.config, args.set)
    if args.seed is not None:
        resolved["train"]["seed"] = args.seed
    axis = resolved["axis"]
    levels = resolved["levels"]
    if not levels:
        levels = {
            "propagation_mode": list(evalharness.PROPAGATION_LEVELS),
            "node_degree": list(DEGREE_LEVELS),
            "feature_set": list(evalharness.FEATURE_LEVELS),
        }.get(axis)
        if levels is None:
            raise ConfigError(f"unknown ablation axis {axis!r}; pick one "
                              f"of {evalharness.ABLATION_AXES}")
    base = make_typed(training.train_config_from_dict, resolved["train"],
                      "training config")
    try:
        spec = evalharness.AblationSpec(
            axis=axis, levels=tuple(levels), train_config=base,
            seeds=tuple(resolved["seeds"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid ablation spec: {exc}")
    dataset = _load_dataset(resolved)
    if args.out is not None:
        write_manifest(args.out, "ablate", args.config, base.seed,
                       resolved, args.set)
    result = evalharness.run_ablation(spec, dataset, out_dir=args.out)

    header = f"{'level':>28s} {'supervision':>12s} {'median':>8s} " \
             f"{'mean':>8s} {'std':>8s} {'iou':>7s} {'div':>3s}"
    print(header)
    for entry in result["summary"]:
        print(f"{str(entry['level']):>28s} {entry['supervision']:>12s} "
              f"{entry['loc_error_median']:8.4f} "
              f"{entry['loc_error_mean']:8.4f} "
              f"{entry['loc_error_std']:8.4f} "
              f"{entry['iou_mean']:7.4f} {entry['diverged']:3d}")
    if all(row["diverged"] for row in result["rows"]):
        print("every run diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args):
    resolved = resolve(gradcheck_defaults(), args.config, args.set)
    if args.seed is not None:
        resolved["seed"] = args.seed
    config = make_typed(lambda d: PropagationConfig(**d),
                        resolved["propagation"], "propagation config")
    try:
        report = gradcheck_mod.run_gradcheck(
            draws=resolved["draws"], eps=resolved["eps"],
            seed=resolved["seed"], threshold=resolved["threshold"],
            config=config)
    except ad.NonFiniteError as exc:
        print(f"gradient check hit non-finite values: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC

    print(f"model: max rel error {report['model']['max_rel_error']:.3e} "
          f"over {len(report['model']['draws'])} draws")
    for name, err in sorted(report["losses"].items()):
        print(f"loss {name}: max rel error {err:.3e}")
    print(f"overall max rel error {report['max_rel_error']:.3e} "
          f"(threshold {report['threshold']:.0e})")
    if args.out is not None:
        write_manifest(args.out, "gradcheck", args.config, resolved["seed"],
                       resolved, args.set)
        evalharness.write_json(os.path.join(args.out, "gradcheck.json"),
                               report)
    if not report["passed"]:
        print("FAIL: above threshold", file=sys.stderr)
        return EXIT_THRESHOLD
    print("PASS")
    return EXIT_OK


def _load_json(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{what} {path} is not valid JSON: {exc}")


def cmd_report(args):
    resolved = resolve(report_defaults(), args.config, args.set)
    if args.out is None:
        raise ConfigError("report needs --out for the plot files")
    if not resolved["ablation_summary"] and not resolved["binned_metrics"]:
        raise ConfigError("nothing to report: set ablation_summary and/or "
                          "binned_metrics")
    write_manifest(args.out, "report", args.config, args.seed or 0,
                   resolved, args.set)
    written = []

    if resolved["binned_metrics"]:
        series_iou, series_err, rows = [], [], []
        for entry in resolved["binned_metrics"]:
            if not isinstance(entry, dict) or \
                    {"label", "path"} - set(entry):
                raise ConfigError("binned_metrics entries need "
                                  "{label, path}")
            doc = _load_json(entry["path"], "metrics file")
            if "binned" not in doc:
                raise ConfigError(f"{entry['path']} has no binned metrics; "
                                  f"run eval with binned=true")
            pts_iou, pts_err = [], []
            for row in doc["binned"]:
                center = 0.5 * (row["bin_lo"] + row["bin_hi"])
                pts_iou.append((center, row["iou"]))
                pts_err.append((center, row["loc_error"]))
                rows.append({"model": entry["label"], **row})
            series_iou.append((entry["label"], pts_iou))
            series_err.append((entry["label"], pts_err))
        for name, series, ylab in (
                ("iou_vs_distance.svg", series_iou, "IoU"),
                ("loc_error_vs_distance.svg", series_err,
                 "localization error (m)")):
            path = os.path.join(args.out, name)
            evalharness.svg_line_plot(path, series, title=ylab
                                      + " by distance",
                                      x_label="distance (m)", y_label=ylab)
            written.append(path)
        path = os.path.join(args.out, "distance_bins.csv")
        evalharness.write_csv(path, rows)
        written.append(path)

    if resolved["ablation_summary"]:
        doc = _load_json(resolved["ablation_summary"], "ablation summary")
        summary = doc.get("summary", [])
        if not summary:
            raise ConfigError(f"{resolved['ablation_summary']} holds no "
                              f"summary rows")
        labels = [str(row["level"]) for row in summary]
        values = [row["loc_error_median"] for row in summary]
        errors = [row["loc_error_std"] for row in summary]
        path = os.path.join(args.out, "ablation_loc_error.svg")
        evalharness.svg_bar_chart(path, labels, values, errors=errors,
                                  title=f"{doc.get('axis', 'ablation')}: "
                                        f"localization error",
                                  y_label="median loc error (m)")
        written.append(path)
        path = os.path.join(args.out, "ablation_table.csv")
        evalharness.write_csv(path, summary)
        written.append(path)

    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="JSON config file; fields below are defaults")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable "
                             "(values parse as JSON, else string)")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (manifest.json is written "
                             "alongside the artifacts)")
    parser.add_argument("--seed", type=int,
                        help="override the command's primary seed")


def _epilog(defaults):
    return ("config fields and defaults:\n"
            + json.dumps(defaults, indent=2, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bevgraph",
        description="Graph-based bird's-eye-view localization toolkit. "
                    "BEVGRAPH_THREADS caps the worker count; "
                    "BEVGRAPH_KERNELS picks the compute backend (c/python).")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = (
        ("simulate", cmd_simulate, simulate_defaults(),
         "generate a synthetic dataset (train/val splits)"),
        ("train", cmd_train, train_defaults(),
         "train a model on a simulated dataset"),
        ("eval", cmd_eval, eval_defaults(),
         "evaluate a checkpoint on a dataset split"),
        ("ablate", cmd_ablate, ablate_defaults(),
         "train one config per (level, seed) along an ablation axis"),
        ("gradcheck", cmd_gradcheck, gradcheck_defaults(),
         "verify tape gradients against central differences"),
        ("report", cmd_report, report_defaults(),
         "render CSV tables and SVG plots from eval/ablate outputs"),
    )
    for name, handler, defaults, help_text in specs:
        cmd = sub.add_parser(
            name, help=help_text, description=help_text,
            epilog=_epilog(defaults),
            formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_common(cmd)
        cmd.set_defaults(handler=handler)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except training.TrainingDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
