"""Flat ``section.key = value`` configuration with typed defaults.

    # comment
    seed = 7
    train.epochs = 40
    encoder.block_filters = 4, 4, 8

Wrap a value in double quotes to keep leading or trailing spaces. Keys not
listed in :data:`DEFAULTS` are rejected. A file overrides the
defaults and ``--set key=value`` pairs override the file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .classifier import ClassifierConfig
from .dsp import FilterSpec, PipelineConfig, StftSpec
from .encoder import EncoderConfig
from .ingest import DEFAULT_PATTERN, IngestError, compile_pattern
from .textgen import DEFAULT_TEMPLATE, BackendSpec, PromptTemplate, TemplateError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_enc, _clf, _tr = EncoderConfig(), ClassifierConfig(), TrainConfig()

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dsp.sample_rate_hz": 128.0,
    "dsp.passband_low_hz": 0.5,
    "dsp.passband_high_hz": 50.0,
    "dsp.fir_taps": 129,
    "dsp.stft_window": 32,
    "dsp.stft_hop": 16,
    "dsp.stft_cutoff_hz": 50.0,
    "dsp.length": 384,
    "dsp.zscore": False,
    **{f"encoder.{k}": v for k, v in _enc.to_dict().items() if k != "n_channels"},
    **{f"classifier.{k}": v for k, v in _clf.to_dict().items() if k != "n_classes"},
    **{f"train.{k}": v for k, v in _tr.to_dict().items() if k != "seed"},
    "train.dtype": "float32",
    "textgen.template": DEFAULT_TEMPLATE,
    "textgen.backend": "builtin",
    "textgen.url": "",
    "textgen.token": "",
    "textgen.model": "",
    "textgen.timeout": 30.0,
    "textgen.max_tokens": 64,
    "textgen.temperature": 1.0,
    "textgen.order": 3,
    "textgen.smoothing": 1.0,
    "textgen.corpus": "",
    "textgen.references": "",
    "textgen.concurrency": 1,
    "paths.dataset_dir": "data",
    "paths.output_dir": "out",
    "paths.checkpoint": "out/model.ckpt",
    "paths.filename_pattern": DEFAULT_PATTERN,
}

# offsets added to the top-level seed so one value reproduces every stage
SEED_OFFSETS = {"synth": 0, "split": 1, "init": 2, "train": 3, "textgen": 4, "subsample": 5}


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            if key == "dsp.stft_cutoff_hz" and raw.lower() == "none":
                return None
            return float(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip()]
        if len(raw) >= 2 and raw[0] == raw[-1] == '"':
            # quoted strings keep edge whitespace (the prompt template ends in a space)
            return json.loads(raw)
        return raw
    except ValueError:  # json.JSONDecodeError included
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _coerce(key, raw, DEFAULTS[key])

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        cfg = cls()
        cfg.update_from_text(text, source)
        return cfg

    def update_from_text(self, text: str, source: str = "<config>") -> None:
        for lineno, line in enumerate(text.splitlines(), start=1):
            # "#" starts a comment except inside the template value
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            if key.strip() != "textgen.template" and "#" in value:
                value = value.split("#", 1)[0]
            try:
                self.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "Config":
        cfg = cls()
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
            cfg.update_from_text(text, str(path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            cfg.set(*item.split("=", 1))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Build every typed section once so bad values surface at load time."""
        try:
            self.pipeline()
            self.encoder()
            self.classifier(2)
            self.train()
            self.template()
            compile_pattern(self["paths.filename_pattern"])
            np.dtype(self["train.dtype"])
        except (ValueError, TypeError, IngestError, TemplateError) as exc:
            raise ConfigError(str(exc)) from None
        if self["train.dtype"] not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")

    def to_text(self) -> str:
        lines = []
        for k, v in self.values.items():
            if isinstance(v, list):
                v = ", ".join(map(str, v))
            elif v is None:
                v = "none"
            elif isinstance(v, str) and v != v.strip():
                v = json.dumps(v, ensure_ascii=False)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------
    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def seed_for(self, stage: str) -> int:
        return int(self["seed"]) + SEED_OFFSETS[stage]

    def pipeline(self) -> PipelineConfig:
        d = self.section("dsp")
        fs = d["sample_rate_hz"]
        return PipelineConfig(
            FilterSpec(fs, d["passband_low_hz"], d["passband_high_hz"], d["fir_taps"]),
            StftSpec(d["stft_window"], d["stft_hop"], fs, d["stft_cutoff_hz"]),
            d["length"], d["zscore"])

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**self.section("encoder"))

    def classifier(self, n_classes: int) -> ClassifierConfig:
        return ClassifierConfig(n_classes=n_classes, **self.section("classifier"))

    def train(self) -> TrainConfig:
        d = self.section("train")
        d.pop("dtype")
        return TrainConfig(seed=self.seed_for("train"), **d)

    @property
    def dtype(self):
        return np.dtype(self["train.dtype"])

    def template(self) -> PromptTemplate:
        return PromptTemplate(self["textgen.template"])

    def backend(self, text: str | None = None) -> BackendSpec:
        d = self.section("textgen")
        common = dict(token=d["token"] or None, model=d["model"], timeout=d["timeout"],
                      max_tokens=d["max_tokens"], temperature=d["temperature"],
                      seed=self.seed_for("textgen"), order=d["order"],
                      smoothing=d["smoothing"], corpus=d["corpus"] or None)
        if d["url"]:
            common["url"] = d["url"]
        try:
            return BackendSpec.parse(text or d["backend"], **common)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
