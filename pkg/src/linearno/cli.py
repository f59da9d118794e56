"""Command-line entry point: data generation, training, ablation grids,
and analysis probes.

Configuration is a plain-text file of ``key = value`` lines plus flag
overrides (flags win). Unknown keys and unknown flags are hard errors,
and the fully resolved configuration is echoed into the output
directory for provenance. Exit codes: 0 success, 2 configuration
error, 3 numeric abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .analysis import (
    KernelParams,
    export_slice_weights,
    mc_convergence,
    rank_profile,
    runtime_probe,
)
from .attention import AttentionConfig, ConfigError, table_rows
from .container import ContainerError, pack_json, save
from .datasets import DataSpec, load_completer_split, load_self_split, write_dataset
from .model import CompleterOperator, OperatorConfig, SelfOperator
from .tensor import NumericsError
from .training import (
    CompleterTask,
    SelfTask,
    TrainConfig,
    metric_rel_l2,
    metric_rel_mae,
    train,
)

TASKS = ("burgers-self", "burgers-completer", "mc-convergence", "runtime-probe")
TRAIN_TASKS = TASKS[:2]
ANALYZE_TASKS = TASKS[2:]
GRIDS = ("gen-sim", "norm", "slices")
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# config schema: key -> (caster, default)

def _cast_bool(raw):
    s = str(raw).strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {raw!r}")


def _cast_int_list(raw):
    if isinstance(raw, (list, tuple)):
        return [int(v) for v in raw]
    parts = str(raw).replace(",", " ").split()
    if not parts:
        raise ConfigError("expected a list of integers")
    return [int(p) for p in parts]


def _cast_float_pair(raw):
    if isinstance(raw, (list, tuple)):
        vals = [float(v) for v in raw]
    else:
        vals = [float(p) for p in str(raw).replace(",", " ").split()]
    if len(vals) != 2:
        raise ConfigError(f"expected two floats, got {raw!r}")
    return tuple(vals)


def _cast_optional_float(raw):
    s = str(raw).strip().lower()
    if s in ("none", ""):
        return None
    return float(raw)


def _enum(*allowed):
    def cast(raw):
        s = str(raw).strip()
        if s not in allowed:
            raise ConfigError(f"expected one of {allowed}, got {raw!r}")
        return s
    return cast


_DATA_KEYS = {
    "nx": (int, 64),
    "nt": (int, 64),
    "samples_train": (int, 512),
    "samples_val": (int, 64),
    "samples_test": (int, 64),
    "rate": (float, 0.1),
    "region": (_cast_float_pair, (0.25, 0.75)),
    "nu": (float, 0.01),
    "t_end": (float, 1.0),
}

_MODEL_KEYS = {
    "dim": (int, 32),
    "layers": (int, 2),
    "heads": (int, 4),
    "slices": (int, 16),
    "mlp_ratio": (int, 2),
    "mechanism": (str, "linearno"),
    "gen": (_cast_bool, True),
    "sim": (_cast_bool, True),
    "qnorm": (_enum("M", "N"), "M"),
    "knorm": (_enum("M", "N"), "N"),
}

_TRAIN_KEYS = {
    "task": (_enum(*TASKS), None),
    "data": (str, None),
    "epochs": (int, 200),
    "lr": (float, 1e-3),
    "optimizer": (str, "adamw"),
    "schedule": (str, "onecycle"),
    "batch_size": (int, 16),
    "weight_decay": (float, 1e-5),
    "clip_norm": (_cast_optional_float, None),
    "loss": (str, "rel_l2"),
    **_MODEL_KEYS,
}

_ANALYZE_KEYS = {
    "task": (_enum(*TASKS), None),
    "checkpoint": (str, None),
    "mc_v": (_enum("sin", "const"), "sin"),
    "mc_slices": (int, 8),
    "mc_trials": (int, 64),
    "mc_n_list": (_cast_int_list, [64, 256, 1024, 4096]),
    "probe_n_list": (_cast_int_list, [256, 1024, 4096]),
    "repeats": (int, 5),
    "probe_points": (int, 256),
    **_MODEL_KEYS,
}

_SCHEMAS = {
    "gen-data": {"seed": (_cast_int_list, [0]), **_DATA_KEYS},
    "train": {"seed": (_cast_int_list, [0]), **_TRAIN_KEYS},
    "ablate": {"seed": (_cast_int_list, [0]), **_TRAIN_KEYS,
               "grid": (_enum(*GRIDS), "gen-sim"),
               "slice_list": (_cast_int_list, [8, 16, 32])},
    "analyze": {"seed": (_cast_int_list, [0]), **_ANALYZE_KEYS},
}


def _read_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
            key, raw = text.split("=", 1)
            pairs.append((key.strip(), raw.strip()))
    return pairs


def resolve_config(command, config_path, flag_overrides):
    """Defaults <- config file <- flags, with unknown keys rejected."""
    schema = _SCHEMAS[command]
    values = {k: default for k, (_, default) in schema.items()}
    if config_path:
        for key, raw in _read_config_file(config_path):
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            values[key] = schema[key][0](raw)
    for key, value in flag_overrides.items():
        if value is None:
            continue
        values[key] = schema[key][0](value)
    return values


def _format_value(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def echo_resolved(values, out_dir):
    """Write the fully resolved configuration for provenance."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k} = {_format_value(values[k])}" for k in sorted(values)
             if values[k] is not None]
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _format_table(headers, rows):
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*cells[0]), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in cells[1:]]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gen-data

def _data_paths(data_dir):
    return {s: os.path.join(data_dir, f"burgers_{s}.lnoc") for s in SPLITS}


def cmd_gen_data(values, out_dir, force):
    if len(values["seed"]) != 1:
        raise ConfigError("gen-data takes exactly one seed")
    spec = DataSpec(n_x=values["nx"], n_t=values["nt"],
                    samples_train=values["samples_train"],
                    samples_val=values["samples_val"],
                    samples_test=values["samples_test"],
                    rate=values["rate"], region=values["region"],
                    nu=values["nu"], t_end=values["t_end"],
                    seed=values["seed"][0])
    targets = _data_paths(out_dir)
    existing = [p for p in targets.values() if os.path.exists(p)]
    if existing and not force:
        raise FileExistsError(
            f"refusing to overwrite {existing[0]} (pass --force to regenerate)")
    echo_resolved(values, out_dir)
    paths = write_dataset(spec, out_dir)
    for name in SPLITS:
        print(f"wrote {paths[name]}")
    return 0


# ---------------------------------------------------------------------------
# train

def _require_data_dir(data_dir):
    if not data_dir:
        raise ConfigError("set data = <dir> (a directory produced by gen-data)")
    paths = _data_paths(data_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise ConfigError(f"referenced data file {p!r} does not exist")
    return paths


def _operator_config(values):
    return OperatorConfig(coord_dim=2, func_dim=1, out_dim=1,
                          dim=values["dim"], layers=values["layers"],
                          slices=values["slices"], heads=values["heads"],
                          mlp_ratio=values["mlp_ratio"],
                          mechanism=values["mechanism"],
                          generalization=values["gen"],
                          simplification=values["sim"],
                          q_norm=values["qnorm"], k_norm=values["knorm"])


def _load_splits(task, paths):
    loader = load_self_split if task == "burgers-self" else load_completer_split
    return {name: loader(path) for name, path in paths.items()}


def _build_tasks(task, model, splits):
    task_cls = SelfTask if task == "burgers-self" else CompleterTask
    return {name: task_cls(model, split) for name, split in splits.items()}


def _train_config(values, seed):
    return TrainConfig(epochs=values["epochs"], lr=values["lr"],
                       optimizer=values["optimizer"],
                       weight_decay=values["weight_decay"],
                       schedule=values["schedule"],
                       batch_size=values["batch_size"],
                       clip_norm=values["clip_norm"], seed=seed,
                       loss=values["loss"])


def _raw_metrics(tasks, splits, train_split):
    """Test metrics in physical units, plus the constant-mean baseline."""
    test_split = splits["test"]
    pred = test_split.destandardize(tasks["test"].predict())
    target = test_split.destandardize(test_split.target)
    baseline_value = float(np.mean(train_split.destandardize(train_split.target)))
    baseline = np.full_like(target, baseline_value)
    return {
        "test_rel_l2": metric_rel_l2(pred, target),
        "test_rel_mae": metric_rel_mae(pred, target),
        "baseline_rel_l2": metric_rel_l2(baseline, target),
        "baseline_rel_mae": metric_rel_mae(baseline, target),
    }


def _run_single(values, seed, run_dir, resume=None):
    """Train one model on one seed; returns the metrics dict."""
    paths = _require_data_dir(values["data"])
    splits = _load_splits(values["task"], paths)
    model_cls = SelfOperator if values["task"] == "burgers-self" else CompleterOperator
    model = model_cls(_operator_config(values), seed=seed)
    tasks = _build_tasks(values["task"], model, splits)
    report, _ = train(tasks["train"], tasks["val"], _train_config(values, seed),
                      out_dir=run_dir, resume=resume)
    metrics = _raw_metrics(tasks, splits, splits["train"])
    metrics.update({"seed": seed, "best_val": report.summary["best_val"],
                    "final_train": report.summary["final_train"],
                    "param_count": report.summary["param_count"]})
    _write_json(os.path.join(run_dir, "metrics.json"), metrics)
    return metrics


def cmd_train(values, out_dir, resume):
    if values["task"] is None:
        raise ConfigError(f"set --task (one of {TRAIN_TASKS})")
    if values["task"] not in TRAIN_TASKS:
        raise ConfigError(f"task {values['task']!r} is not a training task "
                          f"(choose from {TRAIN_TASKS})")
    seeds = values["seed"]
    if resume is not None:
        if len(seeds) != 1:
            raise ConfigError("--resume requires exactly one seed")
        if not os.path.exists(resume):
            raise ConfigError(f"resume checkpoint {resume!r} does not exist")
    _require_data_dir(values["data"])
    echo_resolved(values, out_dir)
    per_seed = []
    for seed in seeds:
        run_dir = os.path.join(out_dir, f"seed{seed}")
        metrics = _run_single(values, seed, run_dir, resume=resume)
        per_seed.append(metrics)
        print(f"seed {seed}: test rel L2 {metrics['test_rel_l2']:.5f}  "
              f"rel MAE {metrics['test_rel_mae']:.5f}")
    summary = {"task": values["task"], "seeds": seeds, "runs": per_seed,
               "mean_test_rel_l2": float(np.mean([m["test_rel_l2"] for m in per_seed])),
               "mean_test_rel_mae": float(np.mean([m["test_rel_mae"] for m in per_seed]))}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return 0


# ---------------------------------------------------------------------------
# ablate

def _grid_rows(values):
    if values["grid"] == "gen-sim":
        rows = []
        for gen, sim in table_rows():
            label = AttentionConfig.ablation(values["dim"], values["slices"],
                                             gen, sim, values["heads"]).row_label()
            rows.append((label, {"mechanism": "linearno", "gen": gen, "sim": sim}))
        return rows
    if values["grid"] == "norm":
        combos = [("M", "N"), ("M", "M"), ("N", "N"), ("N", "M")]
        return [(f"q={q},k={k}", {"qnorm": q, "knorm": k}) for q, k in combos]
    return [(f"slices={m}", {"slices": m}) for m in values["slice_list"]]


def _file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _sanitize(label):
    return label.replace("=", "-").replace(",", "_")


def cmd_ablate(values, out_dir):
    if values["task"] is None:
        raise ConfigError(f"set --task (one of {TRAIN_TASKS})")
    if values["task"] not in TRAIN_TASKS:
        raise ConfigError(f"task {values['task']!r} is not a training task "
                          f"(choose from {TRAIN_TASKS})")
    paths = _require_data_dir(values["data"])
    echo_resolved(values, out_dir)
    rows = _grid_rows(values)
    seeds = values["seed"]
    data_hashes = {name: _file_hash(path) for name, path in paths.items()}

    jobs = []
    for label, overrides in rows:
        for seed in seeds:
            row_values = {**values, **overrides}
            run_dir = os.path.join(out_dir, "rows", _sanitize(label), f"seed{seed}")
            jobs.append((label, row_values, seed, run_dir))

    workers = int(os.environ.get("LNO_THREADS", "1"))
    if workers < 1:
        raise ConfigError(f"LNO_THREADS must be >= 1, got {workers}")
    if workers == 1:
        results = [_run_single(v, s, d) for _, v, s, d in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _run_single(j[1], j[2], j[3]), jobs))

    rel_l2 = np.array([r["test_rel_l2"] for r in results]).reshape(len(rows), len(seeds))
    rel_mae = np.array([r["test_rel_mae"] for r in results]).reshape(len(rows), len(seeds))
    labels = [label for label, _ in rows]

    headers = ["config"] + [f"seed{s}" for s in seeds] + ["mean rel L2"]
    table_rows_txt = []
    for i, label in enumerate(labels):
        table_rows_txt.append([label] + [f"{v:.5f}" for v in rel_l2[i]]
                              + [f"{rel_l2[i].mean():.5f}"])
    table = _format_table(headers, table_rows_txt)
    with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
        f.write(table)
    print(table, end="")

    meta = {"grid": values["grid"], "task": values["task"], "labels": labels,
            "seeds": seeds, "data_hashes": data_hashes}
    save(os.path.join(out_dir, "ablation.lnoc"),
         {"rel_l2": rel_l2, "rel_mae": rel_mae, "meta": pack_json(meta)})
    return 0


# ---------------------------------------------------------------------------
# analyze

def _mc_v(kind):
    if kind == "const":
        return lambda y: np.full_like(np.asarray(y, dtype=np.float64), 0.5)
    return lambda y: np.sin(2.0 * np.pi * np.asarray(y, dtype=np.float64))


def cmd_analyze(values, out_dir):
    task = values["task"]
    if task is None:
        raise ConfigError(f"set --task (one of {ANALYZE_TASKS})")
    if task not in ANALYZE_TASKS:
        raise ConfigError(f"task {task!r} is not an analysis task "
                          f"(choose from {ANALYZE_TASKS})")
    seed = values["seed"][0]
    echo_resolved(values, out_dir)

    if task == "mc-convergence":
        params = KernelParams.draw(values["mc_slices"], seed)
        trace = mc_convergence(params, _mc_v(values["mc_v"]),
                               values["mc_n_list"], trials=values["mc_trials"],
                               seed=seed)
        sections = {"n_values": np.asarray(trace.n_values, dtype=np.uint64),
                    "deviations": np.asarray(trace.deviations),
                    "meta": pack_json({**trace.metadata, "v": values["mc_v"]})}
        if trace.slope is not None:
            sections["slope"] = np.array([trace.slope])
        save(os.path.join(out_dir, "mc_trace.lnoc"), sections)
        rows = [[n, f"{d:.6e}"] for n, d in zip(trace.n_values, trace.deviations)]
        table = _format_table(["N", "mean abs deviation"], rows)
        slope_line = ("slope = absent (zero deviation)" if trace.slope is None
                      else f"slope = {trace.slope:.4f}")
        with open(os.path.join(out_dir, "mc_trace.txt"), "w") as f:
            f.write(table + slope_line + "\n")
        print(table + slope_line)
        return 0

    # runtime-probe: timing table plus model diagnostics (rank profile and
    # slice-weight export from a fresh seeded model, or a checkpoint).
    attn_cfg = AttentionConfig(values["dim"], values["slices"], values["heads"],
                               values["mechanism"], values["gen"], values["sim"],
                               values["qnorm"], values["knorm"])
    probe = runtime_probe(attn_cfg, values["probe_n_list"], repeats=values["repeats"],
                          seed=seed)
    rows = probe["rows"]
    sections = {"n": np.asarray([r["n"] for r in rows], dtype=np.uint64),
                "median_s": np.asarray([r["median_s"] for r in rows]),
                "flops": np.asarray([r["flops"] for r in rows], dtype=np.uint64),
                "meta": pack_json({"repeats": values["repeats"], "seed": seed,
                                   "dim": values["dim"], "slices": values["slices"],
                                   "heads": values["heads"]})}
    if probe["linear_fit_residual"] is not None:
        sections["linear_fit_residual"] = np.array([probe["linear_fit_residual"]])
    save(os.path.join(out_dir, "runtime.lnoc"), sections)
    table = _format_table(["N", "median_s", "flops"],
                          [[r["n"], f"{r['median_s']:.6f}", r["flops"]] for r in rows])
    with open(os.path.join(out_dir, "runtime.txt"), "w") as f:
        f.write(table)
    print(table, end="")

    if values["checkpoint"]:
        if not os.path.exists(values["checkpoint"]):
            raise ConfigError(f"checkpoint {values['checkpoint']!r} does not exist")
        from .model import load_model
        model = load_model(values["checkpoint"])
    else:
        model = SelfOperator(_operator_config({**values, "mechanism": "linearno"}),
                             seed=seed)
    rng = np.random.default_rng(seed)
    n_pts = values["probe_points"]
    coords = rng.uniform(size=(n_pts, model.config.coord_dim))
    inputs = (coords,) if model.config.func_dim == 0 else \
        (coords, rng.normal(size=(n_pts, model.config.func_dim)))
    prof = rank_profile(model, inputs)
    save(os.path.join(out_dir, "rank_profile.lnoc"),
         {"ranks": np.asarray(prof.ranks, dtype=np.uint64),
          "layer_means": np.asarray(prof.layer_means),
          "meta": pack_json(prof.metadata)})
    export_slice_weights(model, inputs, coords,
                         path=os.path.join(out_dir, "slice_weights.lnoc"))
    print(f"rank profile (per layer means): {prof.layer_means}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(sub, *names):
    table = {
        "--task": dict(type=str, default=None, help="experiment task"),
        "--config": dict(type=str, default=None, help="key = value config file"),
        "--seed": dict(type=int, nargs="+", default=None, help="seed list"),
        "--rate": dict(type=float, default=None, help="observed fraction of region points"),
        "--slices": dict(type=int, default=None, help="slice count M"),
        "--dim": dict(type=int, default=None, help="model width"),
        "--layers": dict(type=int, default=None, help="block count"),
        "--heads": dict(type=int, default=None, help="attention heads"),
        "--mechanism": dict(type=str, default=None, help="attention mechanism"),
        "--gen": dict(choices=["on", "off"], default=None,
                      help="independent key projection"),
        "--sim": dict(choices=["on", "off"], default=None,
                      help="drop slice self-attention"),
        "--qnorm": dict(choices=["M", "N"], default=None, help="phi softmax axis"),
        "--knorm": dict(choices=["M", "N"], default=None, help="psi softmax axis"),
        "--epochs": dict(type=int, default=None),
        "--lr": dict(type=float, default=None),
    }
    for name in names:
        sub.add_argument(name, **table[name])


_FLAG_KEYS = {"task": "task", "seed": "seed", "rate": "rate", "slices": "slices",
              "dim": "dim", "layers": "layers", "heads": "heads",
              "mechanism": "mechanism", "gen": "gen", "sim": "sim",
              "qnorm": "qnorm", "knorm": "knorm", "epochs": "epochs", "lr": "lr"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="linearno",
        description="Desk-scale neural-operator lab: data, training, ablations, analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate Burgers dataset splits")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true",
                   help="overwrite existing dataset files")
    _add_common(g, "--config", "--seed", "--rate")

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", type=str, default=None,
                   help="checkpoint to continue from (single seed)")
    _add_common(t, "--task", "--config", "--seed", "--slices", "--dim", "--layers",
                "--heads", "--mechanism", "--gen", "--sim", "--qnorm", "--knorm",
                "--epochs", "--lr")

    a = sub.add_parser("ablate", help="train an ablation grid with shared seeds")
    a.add_argument("--out", required=True, help="output directory")
    _add_common(a, "--task", "--config", "--seed", "--slices", "--dim", "--layers",
                "--heads", "--qnorm", "--knorm", "--epochs", "--lr")

    z = sub.add_parser("analyze", help="convergence traces, runtime tables, ranks")
    z.add_argument("--out", required=True, help="output directory")
    _add_common(z, "--task", "--config", "--seed", "--slices", "--dim", "--layers",
                "--heads", "--qnorm", "--knorm")
    return parser


def _flag_overrides(args):
    overrides = {}
    for attr, key in _FLAG_KEYS.items():
        if hasattr(args, attr) and getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    return overrides


def _dispatch(args):
    values = resolve_config(args.command, args.config, _flag_overrides(args))
    if args.command == "gen-data":
        return cmd_gen_data(values, args.out, args.force)
    if args.command == "train":
        return cmd_train(values, args.out, args.resume)
    if args.command == "ablate":
        return cmd_ablate(values, args.out)
    return cmd_analyze(values, args.out)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse exits 2 on unknown flags
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except NumericsError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 3
    except ContainerError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
