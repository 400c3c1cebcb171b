"""Run configuration: a single JSON document.

Sections: ``env``, ``prompts``, ``hyper``, ``mode``, ``seed``,
``checkpoint_every``, ``output_dir``, ``reference`` and the optional
``init`` / ``reference_init`` logit overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..core import HyperParams, PolicyParams, PromptSet, load_prompt_set, make_prompt_set
from ..env import EnvConfig
from ..exceptions import ConfigError
from ..trainer import Mode

_REFERENCE_KEYS = {"fresh_rollouts": "fresh_reference_rollouts", "k_ref": "ref_rollouts"}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    prompts: str | Mapping[str, Any] = "prompts.json"
    hyper: HyperParams = field(default_factory=HyperParams)
    mode: Mode = Mode.CRT_TWO_STAGE
    seed: int = 0
    checkpoint_every: int = 10
    output_dir: str = "runs/default"
    init: Mapping[str, Any] | None = None
    reference_init: Mapping[str, Any] | None = None
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        hyper = self.hyper.to_dict()
        reference = {k: hyper.pop(v) for k, v in _REFERENCE_KEYS.items()}
        d: dict[str, Any] = {
            "env": self.env.to_dict(),
            "prompts": self.prompts if isinstance(self.prompts, str) else dict(self.prompts),
            "hyper": hyper,
            "mode": self.mode.value,
            "seed": int(self.seed),
            "checkpoint_every": self.checkpoint_every,
            "output_dir": self.output_dir,
            "reference": reference,
        }
        if self.init is not None:
            d["init"] = dict(self.init)
        if self.reference_init is not None:
            d["reference_init"] = dict(self.reference_init)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {"env", "prompts", "hyper", "mode", "seed", "checkpoint_every", "output_dir",
                 "reference", "init", "reference_init"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        hyper = dict(d.get("hyper", {}))
        for key, target in _REFERENCE_KEYS.items():
            if key in d.get("reference", {}):
                hyper[target] = d["reference"][key]
        extra = set(d.get("reference", {})) - set(_REFERENCE_KEYS)
        if extra:
            raise ConfigError(f"unknown reference fields: {sorted(extra)}")
        try:
            return cls(
                env=EnvConfig.from_dict(d.get("env", {})),
                prompts=d.get("prompts", "prompts.json"),
                hyper=HyperParams.from_dict(hyper),
                mode=Mode(d.get("mode", Mode.CRT_TWO_STAGE.value)),
                seed=int(d.get("seed", 0)),
                checkpoint_every=int(d.get("checkpoint_every", 10)),
                output_dir=str(d.get("output_dir", "runs/default")),
                init=d.get("init"),
                reference_init=d.get("reference_init"),
                base_dir=Path(base_dir),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        """SHA-256 of the canonical config, ignoring ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- resolution --------------------------------------------------------

    def load_prompts(self) -> PromptSet:
        if isinstance(self.prompts, str):
            path = Path(self.prompts)
            if not path.is_absolute():
                path = self.base_dir / path
            return load_prompt_set(path)
        gen = self.prompts.get("generate")
        if gen is None:
            raise ConfigError('inline prompts must be {"generate": {"depths": [...], "seed": int}}')
        return make_prompt_set(gen["depths"], int(gen.get("seed", 0)), int(gen.get("max_operand", 9)))

    def _params(self, overrides: Mapping[str, Any] | None) -> PolicyParams | None:
        if overrides is None:
            return None
        nb = self.env.n_buckets
        u = np.array(overrides.get("depth_logits", np.zeros(self.env.s_max)), dtype=float)
        v = np.array(overrides.get("redundancy_logits", np.zeros(self.env.r_max + 1)), dtype=float)
        if u.ndim == 1:
            u = np.tile(u, (nb, 1))
        if v.ndim == 1:
            v = np.tile(v, (nb, 1))
        try:
            return PolicyParams(u, v)
        except ValueError as exc:
            raise ConfigError(f"bad logits: {exc}") from exc

    def init_params(self) -> PolicyParams:
        p = self._params(self.init)
        return p if p is not None else self.env.initial_params()

    def reference_params(self) -> PolicyParams | None:
        return self._params(self.reference_init)


def default_config() -> RunConfig:
    return RunConfig(
        prompts={"generate": {"depths": [2, 3, 4, 5] * 5, "seed": 0}},
        init={"depth_logits": [0, 0, 0, 0, 0, 4.0], "redundancy_logits": [0, 0, 0, 0, 0]},
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc, base_dir=path.parent)
