"""Command-line driver: run, sweep, train-subnet, surgery, eval.

Exit codes: 0 success, 1 runtime failure, 2 bad config, checkpoint or
spec mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import attacks, checkpoint, config, experiment, metrics
from .checkpoint import FormatError
from .config import ConfigError
from .nn import ShapeMismatchError

log = logging.getLogger("fedbackdoor")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad inputs that are not config-file problems (mismatched checkpoints etc.)."""


def resolve_config(name_or_path: str) -> config.ExperimentConfig:
    path = Path(name_or_path)
    if path.exists():
        return config.load(path)
    if path.suffix == "" and name_or_path in config.bundled_names():
        return config.load(config.bundled(name_or_path))
    raise ConfigError("<file>", f"no config file or bundled config named {name_or_path!r}")


def load_config(args) -> config.ExperimentConfig:
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace_field("seed", args.seed)
    return cfg


def out_dir(args, cfg) -> Path:
    path = Path(args.out or cfg.output.dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def format_table(rows: list[dict]) -> str:
    """Aligned plain-text table with one column per key of the first row."""
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if v is None:
            return "-"
        return str(v)

    cells = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def subnet_sidecar(cfg, sspec: attacks.SubnetSpec, stats: attacks.SubnetStats) -> dict:
    atk = cfg.attack
    return {
        "activation_target": atk.activation_target,
        "lam": atk.lam,
        "width": sspec.width,
        "host_channel_indices": [list(map(int, ix)) for ix in sspec.host_channel_indices],
        "host_spec": sspec.host.to_dict(),
        "clean_activation": stats.clean_activation,
        "triggered_activation": stats.triggered_activation,
        "clean_error": stats.clean_error,
        "triggered_error": stats.triggered_error,
    }


def write_subnet(path: Path, cfg, sspec, params, stats):
    checkpoint.save_checkpoint(path / "subnet.fshd", sspec.network, params)
    (path / "subnet.json").write_text(json.dumps(subnet_sidecar(cfg, sspec, stats), indent=2) + "\n")


def execute(cfg, dest: Path, quiet: bool) -> dict:
    """One full experiment written into ``dest``; returns the summary dict."""
    with open(dest / "rounds.jsonl", "w") as fh:
        def on_round(rl):
            fh.write(rl.to_json() + "\n")
            if not quiet:
                print(f"round {rl.t:4d}  acc {rl.clean_accuracy:.4f}  asr {rl.asr:.4f}  "
                      f"event {rl.attack_event}", file=sys.stderr)

        out = experiment.run(cfg, on_round=on_round)
    summary = out.summary()
    (dest / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (dest / "summary.txt").write_text(format_table(
        [{"key": k, "value": json.dumps(v) if isinstance(v, list) else v}
         for k, v in summary.items()]))
    (dest / "config.yaml").write_text(cfg.to_yaml())
    if cfg.output.checkpoints:
        spec = out.setup.spec
        checkpoint.save_checkpoint(dest / "final.fshd", spec, out.result.params)
        if out.result.pre_attack_params is not None:
            checkpoint.save_checkpoint(dest / "pre_attack.fshd", spec, out.result.pre_attack_params)
        if out.subnet is not None:
            write_subnet(dest, cfg, *out.subnet)
    return summary


def cmd_run(args) -> int:
    cfg = load_config(args)
    dest = out_dir(args, cfg)
    summary = execute(cfg, dest, args.quiet)
    if not args.quiet:
        print(format_table([{k: v for k, v in summary.items() if not isinstance(v, list)}]), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    values = [yaml.safe_load(v) for v in args.values.split(",")]
    cfgs = [cfg.replace_field(args.field, v) for v in values]  # validate all before running
    dest = out_dir(args, cfg)
    rows = []
    for value, sub in zip(values, cfgs):
        sub_dir = dest / f"{args.field}={value}"
        sub_dir.mkdir(parents=True, exist_ok=True)
        s = execute(sub, sub_dir, args.quiet)
        rows.append({args.field: value, "converged_at": s["converged_at"],
                     "final_clean_accuracy": s["final_clean_accuracy"], "final_asr": s["final_asr"],
                     "final_cad": s["final_cad"], "attack_rounds": len(s["attack_rounds"])})
    (dest / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    table = format_table(rows)
    (dest / "sweep.txt").write_text(table)
    if not args.quiet:
        print(table, end="")
    return EXIT_OK


def cmd_train_subnet(args) -> int:
    cfg = load_config(args)
    dest = out_dir(args, cfg)
    setup = experiment.build_setup(cfg)
    sspec, params, stats = experiment.train_subnet(cfg, setup)
    write_subnet(dest, cfg, sspec, params, stats)
    if not args.quiet:
        print(f"clean activation {stats.clean_activation:.4f}  "
              f"triggered activation {stats.triggered_activation:.4f}")
    return EXIT_OK


def read_subnet(path: Path, sidecar: Path | None, host_spec):
    sub_spec, sub_params = checkpoint.load_checkpoint(path)
    sidecar = sidecar or path.with_suffix(".json")
    try:
        meta = json.loads(Path(sidecar).read_text())
        indices = [tuple(ix) for ix in meta["host_channel_indices"]]
        width = int(meta["width"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read subnet sidecar {sidecar}: {exc}") from exc
    try:
        sspec = attacks.SubnetSpec(host_spec, tuple(indices), width)
    except ValueError as exc:
        raise UsageError(f"subnet does not fit the host: {exc}") from exc
    if sspec.network != sub_spec:
        raise UsageError("subnet checkpoint architecture does not match the host network")
    sub_params.check_spec(sub_spec)
    return sspec, sub_params, meta


def cmd_surgery(args) -> int:
    cfg = load_config(args)
    host_spec, host = checkpoint.load_checkpoint(args.host)
    sspec, sub, meta = read_subnet(Path(args.subnet), args.sidecar and Path(args.sidecar), host_spec)
    beta = args.beta if args.beta is not None else cfg.attack.beta
    setup = experiment.build_setup(cfg)
    if setup.public.images.shape[1:] != tuple(host_spec.input_shape):
        raise UsageError("config input shape does not match the host checkpoint")
    poisoned, beta = attacks.graft(host, host_spec, sub, sspec, cfg.trigger.target_label,
                                   float(meta["activation_target"]), cfg.attack.margin,
                                   setup.public.images, beta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(out, host_spec, poisoned)
    if not args.quiet:
        print(f"beta {beta:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    spec, params = checkpoint.load_checkpoint(args.checkpoint)
    setup = experiment.build_setup(cfg)
    if spec != setup.spec:
        raise UsageError("checkpoint architecture does not match the config's model")
    reference = args.reference
    if args.benign is not None:
        bspec, bparams = checkpoint.load_checkpoint(args.benign)
        if bspec != spec:
            raise UsageError("benign checkpoint architecture differs from the evaluated one")
        reference = metrics.clean_accuracy(bspec, bparams, setup.test)
    report = metrics.evaluate(spec, params, setup.test, setup.trigger, reference)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="YAML config path or the name of a bundled config")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="fedbackdoor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run one experiment")
    r.add_argument("--out", help="output directory (default: output.dir)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="run one experiment per value")
    s.add_argument("--field", required=True, help="dotted config key, e.g. attack.malicious_clients")
    s.add_argument("--values", required=True, help="comma-separated YAML scalars")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("train-subnet", parents=[common], help="train the backdoor subnet only")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train_subnet)

    g = sub.add_parser("surgery", parents=[common], help="graft a subnet into a host checkpoint")
    g.add_argument("--host", required=True)
    g.add_argument("--subnet", required=True)
    g.add_argument("--sidecar", help="subnet JSON sidecar (default: next to --subnet)")
    g.add_argument("--beta", type=float, help="fixed output boost instead of calibrating")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_surgery)

    e = sub.add_parser("eval", parents=[common], help="clean accuracy, ASR and CAD of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--benign", help="checkpoint whose accuracy is the CAD reference")
    e.add_argument("--reference", type=float, help="CAD reference accuracy")
    e.add_argument("--out", help="write the report as JSON here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ShapeMismatchError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
