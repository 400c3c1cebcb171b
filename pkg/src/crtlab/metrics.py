"""Evaluation quantities: pass@1, mean length, accuracy-efficiency scores,
gzip compression-ratio redundancy and the length-reduction stability table.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import TraceSample

COMPRESS_LEVEL = 9


# ---------------------------------------------------------------------------
# accuracy and length
# ---------------------------------------------------------------------------


def pass_at_1(samples: Sequence[TraceSample]) -> float:
    """Fraction of samples whose final answer verified correct, in [0, 1]."""
    if len(samples) == 0:
        raise ValueError("pass@1 is undefined for zero samples")
    return sum(1 for s in samples if s.correct) / len(samples)


def mean_length(samples: Sequence[TraceSample]) -> float:
    if len(samples) == 0:
        raise ValueError("mean length is undefined for zero samples")
    return float(np.mean([s.token_count for s in samples]))


@dataclass(frozen=True)
class EvalReport:
    """Aggregate and per-prompt evaluation results.

    ``acc`` is a percentage; ``per_prompt`` maps prompt id to
    ``(pass@1 in [0, 1], mean token length)``.
    """

    acc: float
    mean_len: float
    per_prompt: Mapping[str, tuple[float, float]]
    rollouts: int
    extra: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: Iterable[TraceSample], rollouts: int | None = None,
                     extra: Mapping[str, Any] | None = None) -> "EvalReport":
        by_prompt: dict[str, list[TraceSample]] = {}
        for s in samples:
            by_prompt.setdefault(s.prompt_id, []).append(s)
        if not by_prompt:
            raise ValueError("no samples to report on")
        per = {pid: (pass_at_1(ss), mean_length(ss)) for pid, ss in by_prompt.items()}
        counts = [len(ss) for ss in by_prompt.values()]
        if rollouts is None:
            rollouts = counts[0]
        acc = 100.0 * float(np.mean([a for a, _ in per.values()]))
        mlen = float(np.mean([l for _, l in per.values()]))
        return cls(acc, mlen, per, rollouts, dict(extra or {}))

    def to_dict(self) -> dict[str, Any]:
        d = {
            "acc": self.acc,
            "mean_len": self.mean_len,
            "rollouts": self.rollouts,
            "per_prompt": {k: {"pass_at_1": a, "mean_len": l} for k, (a, l) in self.per_prompt.items()},
        }
        if self.extra:
            d["extra"] = dict(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        per = {k: (float(v["pass_at_1"]), float(v["mean_len"])) for k, v in d["per_prompt"].items()}
        return cls(float(d["acc"]), float(d["mean_len"]), per, int(d["rollouts"]), dict(d.get("extra", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def display(self) -> dict[str, str]:
        return {"acc": f"{self.acc:.2f}", "mean_len": f"{self.mean_len:.1f}"}


# ---------------------------------------------------------------------------
# accuracy-efficiency score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AesWeights:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise ValueError("AES weights must all be positive")


AES1 = AesWeights(1.0, 3.0, 5.0)
AES2 = AesWeights(1.0, 3.0, 10.0)
AES_PRESETS = {"aes1": AES1, "aes2": AES2}


def aes(acc_base: float, len_base: float, acc_model: float, len_model: float, w: AesWeights) -> float:
    """Relative length saving plus a reward (beta) or penalty (gamma) on the
    relative accuracy change."""
    if not (acc_base > 0 and len_base > 0):
        raise ValueError("AES needs positive base accuracy and length")
    d_acc = (acc_model - acc_base) / acc_base
    d_len = (len_base - len_model) / len_base
    if d_acc >= 0:
        return w.alpha * d_len + w.beta * abs(d_acc)
    return w.alpha * d_len - w.gamma * abs(d_acc)


# ---------------------------------------------------------------------------
# compression redundancy
# ---------------------------------------------------------------------------


def gzip_bytes(data: bytes, level: int = COMPRESS_LEVEL) -> bytes:
    """RFC 1952 member with a fixed header (mtime 0, OS 255) for bitwise
    reproducible output."""
    comp = zlib.compressobj(level, zlib.DEFLATED, -zlib.MAX_WBITS)
    body = comp.compress(data) + comp.flush()
    xfl = 2 if level == 9 else (4 if level == 1 else 0)
    header = struct.pack("<BBBBLBB", 0x1F, 0x8B, 8, 0, 0, xfl, 255)
    trailer = struct.pack("<LL", zlib.crc32(data) & 0xFFFFFFFF, len(data) & 0xFFFFFFFF)
    return header + body + trailer


def compression_ratio(text: bytes | str) -> float:
    """``len(gzip(text)) / len(text)``; lower means more internal redundancy."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not data:
        raise ValueError("compression ratio is undefined for empty input")
    return len(gzip_bytes(data)) / len(data)


@dataclass(frozen=True)
class RedundancyReport:
    """Mean compression ratios; a subset with no samples is ``None``."""

    r_all: float
    r_correct: float | None
    r_wrong: float | None
    n_all: int
    n_correct: int
    n_wrong: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_all": self.r_all,
            "r_correct": self.r_correct,
            "r_wrong": self.r_wrong,
            "n_all": self.n_all,
            "n_correct": self.n_correct,
            "n_wrong": self.n_wrong,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RedundancyReport":
        return cls(**{k: d[k] for k in ("r_all", "r_correct", "r_wrong", "n_all", "n_correct", "n_wrong")})


def redundancy_report(samples: Sequence[TraceSample]) -> RedundancyReport:
    if len(samples) == 0:
        raise ValueError("redundancy report needs at least one sample")
    ratios = np.array([compression_ratio(s.text) for s in samples])
    ok = np.array([s.correct for s in samples], dtype=bool)

    def _mean(mask: np.ndarray) -> float | None:
        return float(ratios[mask].mean()) if mask.any() else None

    return RedundancyReport(
        r_all=float(ratios.mean()),
        r_correct=_mean(ok),
        r_wrong=_mean(~ok),
        n_all=len(samples),
        n_correct=int(ok.sum()),
        n_wrong=int((~ok).sum()),
    )


# ---------------------------------------------------------------------------
# stability under length reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityRow:
    ad_pct: float | None
    ap_pct: float | None
    ai_pct: float | None
    n_len_down: int

    def to_dict(self) -> dict[str, Any]:
        return {"ad_pct": self.ad_pct, "ap_pct": self.ap_pct, "ai_pct": self.ai_pct, "n_len_down": self.n_len_down}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StabilityRow":
        return cls(d["ad_pct"], d["ap_pct"], d["ai_pct"], int(d["n_len_down"]))


def stability_table(before: EvalReport, after: EvalReport) -> StabilityRow:
    """Among prompts whose mean length strictly decreased, the percentages
    whose pass@1 decreased, stayed exactly equal, or increased."""
    if set(before.per_prompt) != set(after.per_prompt):
        raise ValueError("before/after reports cover different prompt ids")
    if before.rollouts != after.rollouts:
        raise ValueError(f"rollout counts differ: {before.rollouts} vs {after.rollouts}")
    down = up = same = 0
    for pid, (acc_b, len_b) in before.per_prompt.items():
        acc_a, len_a = after.per_prompt[pid]
        if not len_a < len_b:
            continue
        if acc_a < acc_b:
            down += 1
        elif acc_a > acc_b:
            up += 1
        else:
            same += 1
    n = down + same + up
    if n == 0:
        return StabilityRow(None, None, None, 0)
    return StabilityRow(100.0 * down / n, 100.0 * same / n, 100.0 * up / n, n)


# ---------------------------------------------------------------------------
# CSV helpers (columns metric,subset,value)
# ---------------------------------------------------------------------------


def rows_to_csv(rows: Iterable[tuple[str, str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "subset", "value"])
    for metric, subset, value in rows:
        w.writerow([metric, subset, _cell(value)])
    return buf.getvalue()


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_metric_csv(text: str) -> list[tuple[str, str, float | None]]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        v = row["value"]
        out.append((row["metric"], row["subset"], None if v == "" else float(v)))
    return out


def report_rows(report: EvalReport) -> list[tuple[str, str, Any]]:
    rows: list[tuple[str, str, Any]] = [("acc", "all", report.acc), ("mean_len", "all", report.mean_len)]
    for pid, (a, l) in report.per_prompt.items():
        rows.append(("pass_at_1", pid, a))
        rows.append(("mean_len", pid, l))
    return rows


def redundancy_rows(rep: RedundancyReport) -> list[tuple[str, str, Any]]:
    return [("r_zip", "all", rep.r_all), ("r_zip", "correct", rep.r_correct), ("r_zip", "wrong", rep.r_wrong)]


def stability_rows(row: StabilityRow) -> list[tuple[str, str, Any]]:
    return [
        ("ad_pct", "len_down", row.ad_pct),
        ("ap_pct", "len_down", row.ap_pct),
        ("ai_pct", "len_down", row.ai_pct),
        ("n_len_down", "all", row.n_len_down),
    ]


def format_aes_table(rows: Sequence[Mapping[str, Any]]) -> str:
    """Plain-text table: Method, Acc, Len, AES1, AES2."""
    header = f"{'Method':<24}{'Acc':>10}{'Len':>12}{'AES1':>10}{'AES2':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['method']:<24}{r['acc']:>10.2f}{r['mean_len']:>12.1f}{r['aes1']:>10.4f}{r['aes2']:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def isclose_or_none(a: float | None, b: float | None, tol: float = 1e-12) -> bool:
    if a is None or b is None:
        return a is b
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
