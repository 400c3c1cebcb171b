"""``crtlab`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from ..core import PromptSet, load_prompt_set, make_prompt_set
from ..exceptions import ConfigError, PromptSetError
from ..metrics import (
    AES_PRESETS,
    format_aes_table,
    redundancy_rows,
    rows_to_csv,
    stability_rows,
)
from . import runner
from .checkpoint import load_checkpoint
from .config import default_config, load_config
from .plot import line_chart_svg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("crtlab")


def _write_pair(out: Path, payload: dict, csv_text: str) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=1) + "\n")
    out.with_suffix(".csv").write_text(csv_text)


def _prompts_for(args: argparse.Namespace) -> PromptSet:
    if args.prompts:
        return load_prompt_set(args.prompts)
    if getattr(args, "config", None):
        return load_config(args.config).load_prompts()
    raise ConfigError("--prompts (or --config) is required")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    out = runner.train(cfg, args.out, resume=args.resume, max_steps=args.max_steps)
    print(out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    prompts = _prompts_for(args)
    report, samples = runner.evaluate(ckpt, prompts, args.rollouts, args.seed or 0)
    out = Path(args.out or "eval_report.json")
    runner.write_report(report, out)
    if args.dump_rollouts:
        runner.write_rollouts(samples, args.dump_rollouts)
    print(f"acc={report.acc:.2f} mean_len={report.mean_len:.1f} -> {out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    base = runner.load_report(args.base)
    model = runner.load_report(args.model)
    rows = runner.compare(base, model, args.base_name, args.model_name)
    out = Path(args.out or "aes_table.json")
    payload = {"weights": args.weights, "rows": rows,
               "aes": rows[-1][args.weights] if args.weights else None}
    _write_pair(out, payload, runner.compare_csv(rows))
    out.with_suffix(".txt").write_text(format_aes_table(rows))
    sys.stdout.write(format_aes_table(rows))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    prompts = _prompts_for(args)
    text = runner.sweep_checkpoints(args.run_dir, prompts, args.rollouts, args.seed or 0)
    out = Path(args.out or Path(args.run_dir) / "trajectory.csv")
    out.write_text(text)
    print(out)
    return EXIT_OK


def cmd_redundancy(args: argparse.Namespace) -> int:
    rep = runner.redundancy_from_log(args.rollouts_log)
    out = Path(args.out or "redundancy.json")
    _write_pair(out, rep.to_dict(), rows_to_csv(redundancy_rows(rep)))
    print(json.dumps(rep.to_dict()))
    return EXIT_OK


def cmd_stability(args: argparse.Namespace) -> int:
    row = runner.stability_from_reports(args.before, args.after)
    out = Path(args.out or "stability.json")
    _write_pair(out, row.to_dict(), rows_to_csv(stability_rows(row)))
    print(json.dumps(row.to_dict()))
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    if args.print_defaults:
        print(json.dumps(default_config().to_dict(), indent=1))
        return EXIT_OK
    if args.check:
        cfg = load_config(args.check)
        cfg.load_prompts()
        print(cfg.hash())
        return EXIT_OK
    raise ConfigError("config: pass --print-defaults or --check PATH")


def cmd_make_prompts(args: argparse.Namespace) -> int:
    ps = make_prompt_set([int(d) for d in args.depths.split(",")], args.seed or 0)
    ps.save(args.out)
    print(args.out)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    rows = runner.parse_sweep_csv(Path(args.csv).read_text())
    out_dir = Path(args.out or Path(args.csv).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = [r["step"] for r in rows]
    for col in ("acc", "mean_len", "mean_lnorm", "r_zip"):
        svg = line_chart_svg(xs, [r[col] for r in rows], title=col, ylabel=col)
        (out_dir / f"{col}.svg").write_text(svg)
    print(out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crtlab", description="Constraint-rectified length training lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (defaults to the config's output_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many updates (run stays resumable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prompts")
    p.add_argument("--config")
    p.add_argument("--rollouts", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dump-rollouts", help="also write sampled traces as JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="AES table of a model report against a base report")
    p.add_argument("base")
    p.add_argument("model")
    p.add_argument("--weights", choices=sorted(AES_PRESETS))
    p.add_argument("--base-name", default="base")
    p.add_argument("--model-name", default="model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-checkpoints", help="evaluate every checkpoint of a run")
    p.add_argument("run_dir")
    p.add_argument("--prompts")
    p.add_argument("--config")
    p.add_argument("--rollouts", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("redundancy", help="compression-ratio redundancy of a rollout log")
    p.add_argument("rollouts_log")
    p.add_argument("--out")
    p.set_defaults(func=cmd_redundancy)

    p = sub.add_parser("stability", help="accuracy stability among length-reduced prompts")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("config", help="print defaults or validate a config")
    p.add_argument("--print-defaults", action="store_true")
    p.add_argument("--check", metavar="PATH")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("make-prompts", help="write a synthetic prompt-set file")
    p.add_argument("--depths", required=True, help="comma-separated required depths")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_prompts)

    p = sub.add_parser("plot", help="render SVG line charts from a sweep CSV")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (ConfigError, PromptSetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"crtlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map everything else to the runtime exit code
        print(f"crtlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
