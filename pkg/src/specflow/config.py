"""Run configuration ("specflow-cfg-v1"): one JSON document, one section per command."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigParseError, FormatVersionError
from .synth import GeneratorConfig
from .training import TrainConfig

FORMAT_CFG = "specflow-cfg-v1"

_SECTION_DEFAULTS: dict[str, dict[str, Any]] = {
    "fit-manifold": {"k": 12},
    "score": {"steps": 20, "chunk": 256},
    "eval": {"n_bins": 40, "nominal_fpr": 0.10},
    "traverse": {"components": [1, 2, 3], "offsets": [-2.0, -1.0, 0.0, 1.0, 2.0]},
    "sweep-ode": {"grid": [5, 10, 20, 50], "n_scenarios": 200},
}


@dataclass
class RunConfig:
    seed: int = 0
    generate: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(_SECTION_DEFAULTS))

    def section(self, name: str) -> dict[str, Any]:
        return self.sections[name]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"format_version": FORMAT_CFG, "seed": self.seed}
        out["generate"] = asdict(self.generate)
        out["train"] = asdict(self.train)
        out.update(copy.deepcopy(self.sections))
        return out


def _merge_section(name: str, given: Any) -> dict[str, Any]:
    if not isinstance(given, dict):
        raise ConfigParseError(f"section {name!r} must be an object")
    base = copy.deepcopy(_SECTION_DEFAULTS[name])
    unknown = set(given) - set(base)
    if unknown:
        raise ConfigParseError(f"unknown keys in {name!r}: {sorted(unknown)}")
    base.update(given)
    return base


def from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigParseError("config must be a JSON object")
    version = data.get("format_version", FORMAT_CFG)
    if version != FORMAT_CFG:
        raise FormatVersionError(f"unsupported config format {version!r}")
    allowed = {"format_version", "seed", "generate", "train", *_SECTION_DEFAULTS}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigParseError(f"unknown config sections: {sorted(unknown)}")
    try:
        seed = int(data.get("seed", 0))
        gen = GeneratorConfig.from_dict(data.get("generate", {}))
        train_section = dict(data.get("train", {}))
        train_section.setdefault("seed", seed)
        tr = TrainConfig.from_dict(train_section)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(str(exc)) from None
    sections = {name: _merge_section(name, data.get(name, {})) for name in _SECTION_DEFAULTS}
    return RunConfig(seed=seed, generate=gen, train=tr, sections=sections)


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
