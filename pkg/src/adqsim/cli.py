"""Command-line entry point: train, eval, sweep, gap, export, print-default-config.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path

from .adq import ObservationMode
from .config import SimConfig, preset
from .env import run_episode
from .errors import AdqSimError, ConfigurationError, TrainingAborted
from .evalsuite import (
    METHODS,
    SCRIPTED,
    MethodSpec,
    eval_seeds,
    measure_gap,
    method_config,
    net_factory,
    run_ablation_grid,
    threshold_sweep,
)
from .policy import NetPolicy, PolicyNet, RandomBaseline, TrainHyper, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    build: str
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0
    argv: list = field(default_factory=list)

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path


def build_id():
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def worker_count(requested):
    env = os.environ.get("ADQ_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"ADQ_WORKERS must be an integer, got {env!r}") from None
    elif requested is not None:
        n = int(requested)
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def load_config(path, preset_name="nominal"):
    if path is None:
        return preset(preset_name)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return SimConfig.from_json(p.read_text())


def load_net(path, what="checkpoint"):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return PolicyNet.load(p)
    except (ValueError, AdqSimError) as exc:
        raise UsageError(f"cannot read {what} {p}: {exc}") from None


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _floats(text, name):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from None
    if not vals:
        raise UsageError(f"{name} must not be empty")
    return vals


def _checkpoint_map(items):
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--checkpoint expects method=path, got {item!r}")
        out[name.strip()] = path.strip()
    return out


def _table(rows, headers):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h)) for i, h in enumerate(headers)]
    line = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    body = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join([line] + body)


# commands -------------------------------------------------------------------


def cmd_print_default_config(args):
    sys.stdout.write(preset(args.preset).to_json() + "\n")
    return EXIT_OK


def cmd_train(args):
    t0 = time.perf_counter()
    config = load_config(args.config, args.preset)
    if args.mode:
        config = config.with_mode(args.mode)
    config = replace(config, seed=int(args.seed))
    hyper = TrainHyper(
        iterations=args.iterations,
        steps_per_iter=args.steps_per_iter,
        minibatch=args.minibatch,
        lr=args.lr,
        epochs=args.epochs,
        workers=worker_count(args.workers),
    )
    out = _out_dir(args.out)
    ckpt = out / "checkpoint.bin"
    report_path = out / "train_report.csv"
    manifest = RunManifest("train", config.config_hash(), int(args.seed), build_id(), argv=sys.argv[1:])
    (out / "config.json").write_text(config.to_json() + "\n")

    fields = None
    with report_path.open("w", newline="") as fh:
        writer = None

        def on_iteration(net, rep):
            nonlocal writer, fields
            net.save(ckpt)
            row = rep.to_dict()
            if writer is None:
                fields = list(row)
                writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
                writer.writeheader()
            writer.writerow(row)
            fh.flush()
            print(
                f"iter {rep.iteration:4d}  return {rep.mean_return:8.3f}  success {rep.success_rate:5.2f}"
                f"  writhe red {rep.mean_writhe_reduction:7.3f}  ({rep.wall_clock:.1f}s)",
                flush=True,
            )

        try:
            net, _ = train(config, hyper, int(args.seed), on_iteration)
        except TrainingAborted as exc:
            if len(exc.args) > 1 and exc.args[1] is not None:
                exc.args[1].save(ckpt)
            manifest.outputs = [str(ckpt), str(report_path)]
            manifest.wall_clock = time.perf_counter() - t0
            manifest.write(out)
            print(f"training aborted: {exc.args[0]}", file=sys.stderr)
            return EXIT_RUNTIME
        if writer is None:
            csv.writer(fh, lineterminator="\n").writerow(
                ["iteration", "steps", "episodes", "mean_return", "success_rate", "mean_writhe_reduction",
                 "policy_loss", "value_loss", "entropy", "approx_kl", "wall_clock"]
            )
    net.save(ckpt)
    manifest.outputs = [str(ckpt), str(report_path), str(out / "config.json")]
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _method_specs(names, checkpoints):
    specs = []
    for name in names:
        if name not in METHODS:
            raise UsageError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
        if name in SCRIPTED:
            specs.append(MethodSpec(name))
            continue
        if name not in checkpoints:
            raise UsageError(f"method {name!r} needs --checkpoint {name}=PATH")
        specs.append(MethodSpec(name, load_net(checkpoints[name], f"checkpoint for {name}")))
    return specs


def cmd_eval(args):
    t0 = time.perf_counter()
    config = replace(load_config(args.config, args.preset), seed=int(args.seed))
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    specs = _method_specs(names, _checkpoint_map(args.checkpoint))
    workers = worker_count(args.workers)
    out = _out_dir(args.out)
    seeds = eval_seeds(args.n_trials)
    grid = run_ablation_grid(specs, config, args.n_trials, seeds, workers)
    csv_path = out / "eval.csv"
    json_path = out / "eval_summary.json"
    csv_path.write_text(grid.to_csv())
    summary = grid.summary(seed=int(args.seed))
    json_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    outputs = [str(csv_path), str(json_path)]
    if args.record:
        log_dir = _out_dir(out / "episodes")
        for spec in specs:
            policy = NetPolicy(spec.net) if spec.net is not None else _scripted(spec.name)
            for s in seeds[: args.record]:
                rec = run_episode(policy, method_config(spec, config), s, record_frames=True)
                path = log_dir / f"{spec.name}_{s}.jsonl"
                path.write_text(rec.to_jsonl())
                outputs.append(str(path))
    rows = []
    for name, e in summary.items():
        rows.append([
            e["display"], e["n"], f"{e['mean']:.3f}", f"[{e['ci'][0]:.3f}, {e['ci'][1]:.3f}]",
            f"{e['success_rate']:.2f}", _fmt_p(e.get("p")), _fmt_p(e.get("p_adj")),
        ])
    print(_table(rows, ["method", "n", "writhe red", "95% CI", "success", "p", "p (Holm)"]))
    RunManifest("eval", config.config_hash(), int(args.seed), build_id(), outputs,
                time.perf_counter() - t0, sys.argv[1:]).write(out)
    return EXIT_OK


def _scripted(name):
    from .policy import scripted_baseline

    return scripted_baseline(name)


def _fmt_p(p):
    return "-" if p is None or p != p else f"{p:.4f}"


def cmd_sweep(args):
    t0 = time.perf_counter()
    config = replace(load_config(args.config, args.preset), seed=int(args.seed))
    taus = _floats(args.taus, "--taus")
    net = load_net(args.checkpoint, "fixed-threshold checkpoint")
    adaptive = load_net(args.adaptive_checkpoint, "adaptive checkpoint") if args.adaptive_checkpoint else None
    out = _out_dir(args.out)
    res = threshold_sweep(net, taus, config, args.n_trials, adaptive, workers=worker_count(args.workers),
                          ci_seed=int(args.seed))
    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "mean_writhe_reduction", "ci_lo", "ci_hi"])
        for tau, m, (lo, hi) in zip(res.taus, res.means, res.cis):
            w.writerow([tau, m, lo, hi])
    json_path = out / "sweep.json"
    json_path.write_text(json.dumps(res.to_dict(), sort_keys=True, indent=2) + "\n")
    rows = [[f"{t:g}", f"{m:.3f}", f"[{lo:.3f}, {hi:.3f}]"] for t, m, (lo, hi) in zip(res.taus, res.means, res.cis)]
    if adaptive is not None:
        lo, hi = res.adaptive_ci
        rows.append(["adaptive", f"{res.adaptive_mean:.3f}", f"[{lo:.3f}, {hi:.3f}]"])
    print(_table(rows, ["tau", "writhe red", "95% CI"]))
    RunManifest("sweep", config.config_hash(), int(args.seed), build_id(), [str(csv_path), str(json_path)],
                time.perf_counter() - t0, sys.argv[1:]).write(out)
    return EXIT_OK


def cmd_gap(args):
    t0 = time.perf_counter()
    cfg_a = replace(load_config(args.config_a, "nominal"), seed=int(args.seed))
    cfg_b = replace(load_config(args.config_b, "shifted"), seed=int(args.seed))
    if args.checkpoint:
        net = load_net(args.checkpoint)
        factory = net_factory(net)
        cfg_a, cfg_b = cfg_a.with_mode(net.mode), cfg_b.with_mode(net.mode)
    else:
        factory = RandomBaseline
    out = _out_dir(args.out)
    rep = measure_gap(factory, cfg_a, cfg_b, args.n_a, args.n_b, seed=int(args.seed),
                      workers=worker_count(args.workers))
    path = out / "gap.json"
    path.write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")
    rows = [
        ["raw force", f"{rep.raw_mean[0]:.4f}", f"[{rep.raw_mean[1]:.4f}, {rep.raw_mean[2]:.4f}]"],
        ["processed", f"{rep.processed_mean[0]:.4f}", f"[{rep.processed_mean[1]:.4f}, {rep.processed_mean[2]:.4f}]"],
    ]
    print(_table(rows, ["observation", "mean W1", "95% CI"]))
    RunManifest("gap", f"{cfg_a.config_hash()}:{cfg_b.config_hash()}", int(args.seed), build_id(), [str(path)],
                time.perf_counter() - t0, sys.argv[1:]).write(out)
    return EXIT_OK


def export_frames(lines):
    """Frame lines of an episode log in canonical form; raises UsageError with the line number."""
    out = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"line {no}: malformed JSON ({exc.msg})") from None
        if not isinstance(doc, dict) or "type" not in doc:
            raise UsageError(f"line {no}: expected an object with a 'type' field")
        if doc["type"] == "frame":
            if "vertices" not in doc or "substep" not in doc:
                raise UsageError(f"line {no}: frame lacks 'vertices' or 'substep'")
            out.append(json.dumps(doc, sort_keys=True))
    return out


def cmd_export(args):
    src = Path(args.log)
    if not src.is_file():
        raise UsageError(f"episode log not found: {src}")
    with src.open() as fh:
        frames = export_frames(fh)
    Path(args.out).write_text("".join(f + "\n" for f in frames))
    print(f"{len(frames)} frames written to {args.out}")
    return EXIT_OK


# parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="adqsim", description="ADQ cloth-untangling simulation workflows.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file (default: the preset)")
            sp.add_argument("--preset", default="nominal", choices=("nominal", "shifted"))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=None, help="worker processes (ADQ_WORKERS overrides)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("print-default-config", help="print a preset config as JSON")
    sp.add_argument("--preset", default="nominal", choices=("nominal", "shifted"))
    sp.set_defaults(func=cmd_print_default_config)

    sp = sub.add_parser("train", help="train a policy with PPO")
    common(sp)
    sp.add_argument("--mode", choices=[m.value for m in ObservationMode])
    sp.add_argument("--iterations", type=int, default=TrainHyper.iterations)
    sp.add_argument("--steps-per-iter", type=int, default=TrainHyper.steps_per_iter)
    sp.add_argument("--minibatch", type=int, default=TrainHyper.minibatch)
    sp.add_argument("--lr", type=float, default=TrainHyper.lr)
    sp.add_argument("--epochs", type=int, default=TrainHyper.epochs)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate methods on paired seeds")
    common(sp)
    sp.add_argument("--methods", default="random,opposite", help=f"comma list from: {', '.join(METHODS)}")
    sp.add_argument("--checkpoint", action="append", metavar="METHOD=PATH")
    sp.add_argument("--n-trials", type=int, default=30)
    sp.add_argument("--record", type=int, default=0, help="write JSONL logs with frames for the first N episodes")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="fixed-threshold sweep")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="policy trained with a fixed threshold")
    sp.add_argument("--adaptive-checkpoint")
    sp.add_argument("--taus", default="0.05,0.15,0.5,1.0,2.0")
    sp.add_argument("--n-trials", type=int, default=30)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gap", help="observation gap between two configs")
    common(sp, config=False)
    sp.add_argument("--config-a", help="first config (default: nominal preset)")
    sp.add_argument("--config-b", help="second config (default: shifted preset)")
    sp.add_argument("--checkpoint", help="policy to roll out (default: random baseline)")
    sp.add_argument("--n-a", type=int, default=500)
    sp.add_argument("--n-b", type=int, default=150)
    sp.set_defaults(func=cmd_gap)

    sp = sub.add_parser("export", help="extract per-substep frames from an episode log")
    sp.add_argument("log")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdqSimError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
