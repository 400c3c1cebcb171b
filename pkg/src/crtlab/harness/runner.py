"""Experiment orchestration behind the CLI subcommands."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from collections.abc import Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from ..core import PromptSet, Stage, TraceSample
from ..env import sample_group
from ..exceptions import ConfigError, CrtError
from ..gradients import expected_accuracy, expected_length
from ..metrics import (
    AES1,
    AES2,
    EvalReport,
    RedundancyReport,
    StabilityRow,
    aes,
    redundancy_report,
    report_rows,
    rows_to_csv,
    stability_table,
)
from ..normalization import NormStatsSource, normalize_lengths
from ..trainer import EVAL_STREAM, TrainingRun, derive_rng
from .checkpoint import (
    Checkpoint,
    CorruptCheckpointError,
    checkpoint_name,
    list_checkpoints,
    load_checkpoint,
)
from .config import RunConfig

logger = logging.getLogger(__name__)

LOG_NAME = "log.jsonl"
SUMMARY_NAME = "summary.json"
LOCK_NAME = ".lock"


class RunLockedError(CrtError):
    pass


def _holder_alive(lock: Path) -> bool:
    try:
        pid = int(lock.read_text().strip())
    except (OSError, ValueError):
        return True  # unreadable or half-written: assume a live writer
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def run_lock(out_dir: Path) -> Iterator[None]:
    """Exclusive run directory lock. A lock left by a dead process is taken over."""
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        if _holder_alive(lock):
            raise RunLockedError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
        logger.warning("taking over stale lock %s", lock)
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def dump_record(rec: dict[str, Any]) -> str:
    return json.dumps(rec) + "\n"


def _truncate_log(log_path: Path, step: int) -> None:
    """Drop records for steps >= ``step`` (left behind by an interrupted run)."""
    if not log_path.exists():
        return
    keep = []
    for line in log_path.read_text().splitlines(keepends=True):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break  # torn final line
        if rec["step"] >= step:
            break
        keep.append(line)
    log_path.write_text("".join(keep))


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
) -> Path:
    """Run (or continue) training and write log, checkpoints and summary.

    ``max_steps`` stops early after that many updates in this invocation,
    leaving the run resumable; it does not alter the config.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prompts = cfg.load_prompts()
    cfg_hash = cfg.hash()
    log_path = out / LOG_NAME
    with run_lock(out):
        if resume is not None:
            ckpt = load_checkpoint(resume)
            if ckpt.config_hash != cfg_hash:
                raise ConfigError(
                    f"checkpoint {resume} was written by config {ckpt.config_hash[:12]}, "
                    f"not {cfg_hash[:12]}"
                )
            run = ckpt.restore(prompts)
            _truncate_log(log_path, run.state.step)
        else:
            run = TrainingRun.start(
                prompts, cfg.env, cfg.hyper, cfg.mode, cfg.seed,
                init_params=cfg.init_params(), reference_params=cfg.reference_params(),
            )
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
            log_path.write_text("")
            Checkpoint.from_run(run, cfg_hash).save(out / "checkpoints" / checkpoint_name(0))

        last_good = Checkpoint.from_run(run, cfg_hash)
        with open(log_path, "a") as log:
            try:
                for rec in run.iterate(max_steps):
                    log.write(dump_record(rec))
                    log.flush()
                    last_good = Checkpoint.from_run(run, cfg_hash)
                    if run.state.step % cfg.checkpoint_every == 0 or run.done:
                        last_good.save(out / "checkpoints" / checkpoint_name(run.state.step))
            except (FloatingPointError, ArithmeticError, ValueError) as exc:
                path = last_good.save(out / "checkpoints" / checkpoint_name(last_good.step))
                (out / "error.json").write_text(
                    json.dumps({"error": repr(exc), "step": last_good.step, "checkpoint": path.name}, indent=1) + "\n"
                )
                raise
        if run.done:
            write_summary(out, run, cfg_hash)
    return out


def write_summary(out: Path, run: TrainingRun, cfg_hash: str) -> dict[str, Any]:
    p = run.state.params
    ref = run.context.reference.params
    summary = {
        "config_hash": cfg_hash,
        "mode": run.mode.value,
        "steps": run.state.step,
        "stage": run.state.stage.value,
        "stage1_end_step": run.context.stage1_end_step,
        "dual_lambda": run.state.dual_lambda,
        "reference_expected_length": expected_length(ref, run.prompts, run.env),
        "reference_expected_accuracy": expected_accuracy(ref, run.prompts, run.env),
        "final_expected_length": expected_length(p, run.prompts, run.env),
        "final_expected_accuracy": expected_accuracy(p, run.prompts, run.env),
        "len_reference": None if run.context.guard is None else run.context.guard.len_reference,
    }
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def read_log(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(
    ckpt: Checkpoint, prompts: PromptSet, k: int = 16, seed: int = 0
) -> tuple[EvalReport, list[TraceSample]]:
    """Sample ``k`` rollouts per prompt from a checkpoint's policy."""
    if k < 1:
        raise ValueError("k must be >= 1")
    frozen = None
    if ckpt.state.stage is Stage.STAGE_II:
        if ckpt.context.stage1_snapshot is None:
            raise ConfigError("stage II checkpoint carries no frozen statistics")
        frozen = NormStatsSource.frozen(ckpt.context.stage1_snapshot, ckpt.hyper.variance_floor)
        for p in prompts:
            frozen.lookup(p.id)  # raises naming the prompt
    rng = derive_rng(seed, EVAL_STREAM, 0)
    samples: list[TraceSample] = []
    lnorms: list[np.ndarray] = []
    for p in prompts:
        g = sample_group(ckpt.state.params, p, ckpt.env, k, rng)
        samples.extend(g.samples)
        if frozen is not None:
            lnorms.append(normalize_lengths(g, frozen))
        elif k >= 2:
            lnorms.append(normalize_lengths(g, NormStatsSource.live(ckpt.hyper.variance_floor)))
    if k == 1 and frozen is None:
        warnings.warn("k=1: per-prompt length std is unavailable; mean_lnorm omitted", stacklevel=2)
    red = redundancy_report(samples)
    extra = {
        "step": ckpt.step,
        "stage": ckpt.state.stage.value,
        "mean_lnorm": float(np.mean(np.concatenate(lnorms))) if lnorms else None,
        "r_zip": red.r_all,
        "seed": seed,
    }
    return EvalReport.from_samples(samples, rollouts=k, extra=extra), samples


def write_report(report: EvalReport, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    out.with_suffix(".csv").write_text(rows_to_csv(report_rows(report)))
    return out


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_rollouts(samples: Sequence[TraceSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")


def read_rollouts(path: str | Path) -> list[TraceSample]:
    return [TraceSample.from_dict(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]


# ---------------------------------------------------------------------------
# sweep, compare, redundancy, stability
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["step", "acc", "mean_len", "mean_lnorm", "r_zip"]


def sweep_checkpoints(run_dir: str | Path, prompts: PromptSet, k: int = 16, seed: int = 0) -> str:
    """CSV with one row per readable checkpoint, ordered by step."""
    paths = list_checkpoints(run_dir)
    if not paths:
        raise ConfigError(f"no checkpoints under {run_dir}")
    rows = []
    skipped = []
    for path in paths:
        try:
            ckpt = load_checkpoint(path)
        except CorruptCheckpointError as exc:
            warnings.warn(f"skipping corrupt checkpoint {path.name}: {exc}", stacklevel=2)
            skipped.append(path.name)
            continue
        report, _ = evaluate(ckpt, prompts, k, seed)
        rows.append((ckpt.step, report.acc, report.mean_len, report.extra["mean_lnorm"], report.extra["r_zip"]))
    rows.sort(key=lambda r: r[0])
    buf = io.StringIO()
    if skipped:
        buf.write(f"# skipped corrupt checkpoints: {' '.join(skipped)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[dict[str, float | None]]:
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append({k: (None if v == "" else int(v) if k == "step" else float(v)) for k, v in row.items()})
    return out


def compare(base: EvalReport, model: EvalReport, base_name: str = "base", model_name: str = "model") -> list[dict[str, Any]]:
    if set(base.per_prompt) != set(model.per_prompt):
        warnings.warn("reports cover different prompt sets; comparing aggregates only", stacklevel=2)
    rows = []
    for name, rep in ((base_name, base), (model_name, model)):
        rows.append({
            "method": name,
            "acc": rep.acc,
            "mean_len": rep.mean_len,
            "aes1": aes(base.acc, base.mean_len, rep.acc, rep.mean_len, AES1),
            "aes2": aes(base.acc, base.mean_len, rep.acc, rep.mean_len, AES2),
        })
    return rows


def compare_csv(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "acc", "mean_len", "aes1", "aes2"])
    for r in rows:
        w.writerow([r["method"], f"{r['acc']:.2f}", f"{r['mean_len']:.1f}", f"{r['aes1']:.4f}", f"{r['aes2']:.4f}"])
    return buf.getvalue()


def redundancy_from_log(path: str | Path) -> RedundancyReport:
    return redundancy_report(read_rollouts(path))


def stability_from_reports(before: str | Path, after: str | Path) -> StabilityRow:
    return stability_table(load_report(before), load_report(after))
