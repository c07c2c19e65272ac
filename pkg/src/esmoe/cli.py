"""Command-line entry point: ``esmoe <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 a checked assertion failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .config import ConfigError, EsMoeConfig
from .data import SynthSpec, make_dataset
from .gradcheck import TOLERANCE, run_suite
from .io import CheckpointError, save_dataset
from .train import CounterMismatchError, TrainConfig, evaluate, model_from_checkpoint, split_data, train
from .viz import export_heatmaps

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str
    is_list: bool = False


KEYS: dict[str, Key] = {
    # model
    "experts": Key(int, 4, "number of experts E"),
    "k": Key(int, 2, "active experts per sample K"),
    "kernels": Key(int, None, "kernel size per expert (default 3,5,7,9 cycled)", is_list=True),
    "out_channels": Key(int, 8, "expert output channels"),
    "reduction": Key(int, 8, "gating reduction ratio"),
    "eps": Key(float, 1e-9, "soft Top-K renormalisation guard"),
    "rms_norm": Key(bool, False, "per-channel RMS norm after aggregation"),
    # training
    "epochs": Key(int, 30, "training epochs"),
    "batch_size": Key(int, 32, "minibatch size"),
    "lr": Key(float, 0.05, "base learning rate (cosine decay to 0)"),
    "momentum": Key(float, 0.9, "SGD momentum"),
    "lb_weight": Key(float, 1.5, "load-balancing loss weight"),
    "seed": Key(int, 1, "random seed for data and initialisation"),
    "n_train": Key(int, 256, "training samples"),
    "n_val": Key(int, 128, "validation samples"),
    "standardize": Key(bool, True, "standardize input channels"),
    "spread": Key(float, 2.0, "target std of per-image channel means after standardization"),
    # data
    "image_size": Key(int, 32, "synthetic image side length"),
    "channels": Key(int, 3, "input channels"),
    "noise": Key(float, 0.05, "additive Gaussian noise std"),
    "radii": Key(float, [1.0, 2.0, 3.0, 5.0], "blob radius per class", is_list=True),
    "n_blobs": Key(int, 3, "blobs per image"),
    # eval / route-viz / dataset-export
    "samples": Key(int, 50, "samples for eval, route-viz and dataset-export"),
    "window": Key(int, 8, "local window for spatial routing heatmaps"),
    # bench
    "bench_channels": Key(int, 32, "benchmark input/output channels"),
    "bench_size": Key(int, 64, "benchmark spatial size"),
    "repetitions": Key(int, 50, "timed repetitions"),
    "warmup": Key(int, 5, "untimed warmup iterations"),
    "threads": Key(int, 1, "BLAS threads (0 = library default)"),
    # gradcheck
    "gradcheck_channels": Key(int, 8, "input channels for the model-level gradient check"),
    "gradcheck_size": Key(int, 16, "spatial size for the model-level gradient check"),
}


class UsageError(Exception):
    pass


def _coerce(name: str, value, where: str):
    key = KEYS[name]
    if value is None and key.default is None:
        return None

    def one(v):
        if key.type is bool:
            if isinstance(v, bool):
                return v
            raise UsageError(f"{where}: key '{name}' expects true/false, got {v!r}")
        if key.type is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise UsageError(f"{where}: key '{name}' expects an integer, got {v!r}")
        if key.type is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise UsageError(f"{where}: key '{name}' expects a number, got {v!r}")
        return key.type(v)

    if key.is_list:
        if not isinstance(value, list) or not value:
            raise UsageError(f"{where}: key '{name}' expects a non-empty list, got {value!r}")
        return [one(v) for v in value]
    return one(value)


def load_config_file(path) -> dict:
    """Parse a YAML mapping of known keys; errors name the file, line and key."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark else ""
        raise UsageError(f"{path}{line}: YAML parse error: {getattr(exc, 'problem', exc)}") from exc
    if root is None:
        return {}
    if not isinstance(root, yaml.MappingNode):
        raise UsageError(f"{path}:{root.start_mark.line + 1}: config must be a mapping of key: value")
    values = yaml.safe_load(text)
    out = {}
    for key_node, _ in root.value:
        name = key_node.value
        where = f"{path}:{key_node.start_mark.line + 1}"
        if name not in KEYS:
            raise UsageError(f"{where}: unknown key '{name}'")
        out[name] = _coerce(name, values[name], where)
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line flags."""
    settings = {name: key.default for name, key in KEYS.items()}
    if args.config:
        settings.update(load_config_file(args.config))
    for name in KEYS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    return settings


def run_dir(settings: dict, root) -> Path:
    """``<root>/<hash of settings except seed>-seed<seed>``."""
    rest = {k: v for k, v in settings.items() if k != "seed"}
    digest = hashlib.sha256(json.dumps(rest, sort_keys=True).encode()).hexdigest()[:10]
    return Path(root) / f"{digest}-seed{settings['seed']}"


def train_config(s: dict) -> TrainConfig:
    spec = SynthSpec(radii=tuple(s["radii"]), image_size=s["image_size"], channels=s["channels"], noise=s["noise"], n_blobs=s["n_blobs"])
    return TrainConfig(
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        base_lr=s["lr"],
        momentum=s["momentum"],
        lb_weight=s["lb_weight"],
        seed=s["seed"],
        n_train=s["n_train"],
        n_val=s["n_val"],
        n_experts=s["experts"],
        top_k=s["k"],
        kernels=tuple(s["kernels"]) if s["kernels"] else None,
        out_channels=s["out_channels"],
        reduction=s["reduction"],
        eps=s["eps"],
        rms_norm=s["rms_norm"],
        standardize=s["standardize"],
        spread=s["spread"],
        data=spec,
    )


def _model_for(args, s: dict, cfg: TrainConfig):
    if args.checkpoint:
        return model_from_checkpoint(args.checkpoint)
    X, y, _, _ = split_data(cfg)
    return cfg.estimator().initialize(X, y)


def _held_out(cfg: TrainConfig, n: int):
    return make_dataset(cfg.seed, n, cfg.data, start=cfg.n_train + cfg.n_val)


def cmd_train(args, s) -> int:
    cfg = train_config(s)
    out = run_dir(s, args.out)
    report = train(cfg, out)
    (out / "config.yaml").write_text(yaml.safe_dump(s, sort_keys=True))
    f = report.final
    print(f"run directory: {out}")
    print(f"epochs={len(report.epochs)} seconds={report.seconds:.1f}")
    print(f"final task_loss={f.task_loss:.4f} lb_loss={f.lb_loss:.6f} val_acc={f.val_acc:.4f}")
    print(f"mu={np.round(f.mu, 4).tolist()} entropy_infer_bits={f.entropy_infer_bits:.4f}")
    return EXIT_OK


def cmd_eval(args, s) -> int:
    cfg = train_config(s)
    model = _model_for(args, s, cfg)
    X, y = _held_out(cfg, s["samples"])
    try:
        res = evaluate(model, X, y)
    except CounterMismatchError as exc:
        print(f"FAIL: {exc}")
        return EXIT_FAILED
    print(f"samples={res.n_samples} accuracy={res.accuracy:.4f}")
    print(f"mu={np.round(res.stats.mu, 4).tolist()} entropy_bits={res.stats.entropy_bits:.4f}")
    print(f"expert_evaluations={res.expert_evaluations}")
    return EXIT_OK


def cmd_bench(args, s) -> int:
    c = s["bench_channels"]
    base = EsMoeConfig(c, c, n_experts=s["experts"], top_k=s["k"], kernels=s["kernels"], reduction=s["reduction"])
    kw = dict(
        height=s["bench_size"],
        width=s["bench_size"],
        repetitions=s["repetitions"],
        warmup=s["warmup"],
        seed=s["seed"],
        threads=s["threads"] or None,
    )
    ks = range(1, base.n_experts + 1) if args.all_k else [base.top_k]
    try:
        results = [bench.run_latency(EsMoeConfig(c, c, base.n_experts, k, base.kernels, base.reduction), "sparse", **kw) for k in ks]
        results.append(bench.run_latency(base, "dense", **kw))
    except bench.TimerResolutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = run_dir(s, args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = bench.append_csv(args.csv or out / "bench.csv", results)
    print(bench.format_table(results))
    dense = results[-1]
    status = EXIT_OK
    for r in results[:-1]:
        ratio = r.median_us / dense.median_us
        print(f"K={r.top_k}: sparse/dense median ratio {ratio:.3f}, per-expert evaluations {r.per_expert}")
        if r.counter != r.top_k * r.samples:
            print(f"FAIL: K={r.top_k} counter {r.counter} != {r.top_k * r.samples}")
            status = EXIT_FAILED
        if args.max_ratio is not None and r.top_k == base.top_k and ratio > args.max_ratio:
            print(f"FAIL: ratio {ratio:.3f} exceeds {args.max_ratio}")
            status = EXIT_FAILED
    print(f"results appended to {csv_path}")
    return status


def cmd_gradcheck(args, s) -> int:
    results = run_suite(seed=s["seed"], in_channels=s["gradcheck_channels"], size=s["gradcheck_size"])
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<32} worst={r.worst:.3e} entries={r.n_checked}")
    worst = max(r.worst for r in results if r.tolerance == TOLERANCE)
    print(f"worst relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_route_viz(args, s) -> int:
    cfg = train_config(s)
    model = _model_for(args, s, cfg)
    X, _ = _held_out(cfg, s["samples"])
    out = Path(args.out_dir) if args.out_dir else run_dir(s, args.out) / "heatmaps"
    paths = export_heatmaps(out, model.preprocess(X), model.bank_, model.config_, s["window"])
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_dataset_export(args, s) -> int:
    cfg = train_config(s)
    X, y = make_dataset(cfg.seed, s["samples"], cfg.data, start=args.start)
    path = save_dataset(args.output, X, y, cfg.data.radii)
    print(f"wrote {len(y)} samples to {path}")
    return EXIT_OK


def _add_keys(p: argparse.ArgumentParser):
    g = p.add_argument_group("settings (override the config file)")
    for name, key in KEYS.items():
        flag = "--" + name.replace("_", "-")
        kw = dict(dest=name, default=None, help=f"{key.help} [default: {key.default}]")
        if key.type is bool:
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif key.is_list:
            g.add_argument(flag, type=key.type, nargs="+", **kw)
        else:
            g.add_argument(flag, type=key.type, **kw)
    aliases = {"--experts": ["--n-experts"], "--k": ["--top-k"]}
    for flag, extra in aliases.items():
        for a in extra:
            g.add_argument(a, dest=flag[2:], type=int, default=None, help=f"alias of {flag}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esmoe", description="Sparse mixture-of-experts convolution block toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}
    for name, fn, help_ in [
        ("train", cmd_train, "train on the synthetic task; writes report.csv, model.esmo, heatmaps"),
        ("eval", cmd_eval, "inference-mode accuracy, utilization and expert-evaluation counter"),
        ("bench", cmd_bench, "sparse vs dense expert-stage latency"),
        ("gradcheck", cmd_gradcheck, "finite-difference check of every backward pass"),
        ("route-viz", cmd_route_viz, "per-expert spatial routing heatmaps (PGM)"),
        ("dataset-export", cmd_dataset_export, "write synthetic samples to a binary dataset file"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML file of settings")
        p.set_defaults(func=fn)
        cmds[name] = p
    for name in ("train", "bench", "route-viz"):
        cmds[name].add_argument("--out", default="runs", help="root for run directories [default: runs]")
    for name in ("eval", "route-viz"):
        cmds[name].add_argument("--checkpoint", help="model file from `train` (default: untrained model)")
    cmds["route-viz"].add_argument("--out-dir", help="write heatmaps here instead of the run directory")
    cmds["bench"].add_argument("--csv", help="CSV to append to (default: <run dir>/bench.csv)")
    cmds["bench"].add_argument("--all-k", action="store_true", help="time sparse mode for every K in 1..E")
    cmds["bench"].add_argument("--max-ratio", type=float, help="fail if sparse/dense median ratio exceeds this")
    cmds["dataset-export"].add_argument("--output", required=True, help="destination file")
    cmds["dataset-export"].add_argument("--start", type=int, default=0, help="first sample index")
    for p in cmds.values():
        _add_keys(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        settings = resolve(args)
        return args.func(args, settings)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
