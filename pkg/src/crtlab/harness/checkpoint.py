"""Checkpoint files: everything needed to continue or evaluate a run."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from ..core import HyperParams, PromptSet, TrainerState
from ..env import EnvConfig
from ..trainer import Mode, RunContext, TrainingRun

FORMAT = "crtlab-checkpoint/1"


class CorruptCheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: TrainerState
    context: RunContext
    env: EnvConfig
    hyper: HyperParams
    mode: Mode
    seed: int
    config_hash: str

    @property
    def step(self) -> int:
        return self.state.step

    @classmethod
    def from_run(cls, run: TrainingRun, config_hash: str) -> "Checkpoint":
        return cls(run.state, run.context, run.env, run.hp, run.mode, run.seed, config_hash)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT,
            "config_hash": self.config_hash,
            "mode": self.mode.value,
            "seed": self.seed,
            "env": self.env.to_dict(),
            "hyper": self.hyper.to_dict(),
            "state": self.state.to_dict(),
            "context": self.context.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Checkpoint":
        if d.get("format") != FORMAT:
            raise CorruptCheckpointError(f"unrecognized checkpoint format {d.get('format')!r}")
        return cls(
            state=TrainerState.from_dict(d["state"]),
            context=RunContext.from_dict(d["context"]),
            env=EnvConfig.from_dict(d["env"]),
            hyper=HyperParams.from_dict(d["hyper"]),
            mode=Mode(d["mode"]),
            seed=int(d["seed"]),
            config_hash=str(d["config_hash"]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()) + "\n")
        os.replace(tmp, path)
        return path

    def restore(self, prompts: PromptSet) -> TrainingRun:
        return TrainingRun(prompts, self.env, self.hyper, self.mode, self.seed, self.state, self.context)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
        return Checkpoint.from_dict(doc)
    except (CorruptCheckpointError, FileNotFoundError):
        raise
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.json"


def list_checkpoints(run_dir: str | Path) -> list[Path]:
    return sorted((Path(run_dir) / "checkpoints").glob("step_*.json"))
