"""Flat ``key = value`` run configuration.

Precedence is command line > config file > default.  Every key has a
default and unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from . import dsp
from .data import SynthConfig
from .models import ModelSchema
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str = ""


def _training_keys() -> dict[str, Key]:
    defaults = TrainingConfig()
    return {f.name: Key(type(getattr(defaults, f.name)), getattr(defaults, f.name), "training")
            for f in fields(TrainingConfig)}


KEYS: dict[str, Key] = {
    "run_dir": Key(str, "runs/default", "all artifacts are written below this directory"),
    "profile": Key(str, "tiny", "tiny or reference"),
    "f": Key(int, 16, "audio embedding dimension"),
    "dims": Key(str, "8,16,32", "comma-separated embedding dimensions for sweep"),
    "generator_kind": Key(str, "dense", "dense or sequential"),
    "activation": Key(str, "relu", "hidden activation"),
    "decoder_dropout": Key(float, 0.5, ""),
    "generator_dropout": Key(float, 0.5, ""),
    "discriminator_dropout": Key(float, 0.5, ""),
    "classifier_dropout": Key(float, 0.5, ""),
    "frame_ms": Key(float, 0.0, "0 = profile default"),
    "hop_ms": Key(float, 0.0, "0 = profile default"),
    "n_mels": Key(int, 0, "0 = profile default"),
    "data_dir": Key(str, "", "corpus root; empty = <run_dir>/corpus"),
    "split_ratios": Key(str, "0.6,0.2,0.2", "train,val,test scene fractions"),
    "split_seed": Key(int, 0, ""),
    "jobs": Key(int, 1, "data-preparation processes"),
    "classes": Key(int, 2, "synthetic classes"),
    "scenes": Key(int, 10, "synthetic scenes per class"),
    "segments": Key(int, 3, "synthetic 1-s segments per scene"),
    "noise_level": Key(float, 0.1, "synthetic white-noise amplitude"),
    "position_jitter": Key(float, 0.08, ""),
    "hue_jitter": Key(float, 0.1, ""),
    **_training_keys(),
    "resume": Key(str, "", "GAN checkpoint to resume from"),
    "sound": Key(str, "", "WAV file for translate"),
    "samples": Key(int, 4, "translations per sound"),
    "dropout_seed": Key(int, 0, "test-time dropout seed"),
    "test_dropout": Key(bool, True, "keep generator dropout active when translating"),
    "eval_every": Key(int, 0, "oracle informativity every N GAN epochs during sweep (0 = off)"),
    "window": Key(int, 50, "moving-average window"),
    "mask_offsets": Key(str, "1,2", "epochs after a discriminator-update epoch to mask"),
    "avg_start": Key(int, 1, "first epoch of the general average"),
    "avg_end": Key(int, 0, "last epoch of the general average (0 = last)"),
    "permutations": Key(int, 2000, "permutation-test resamples"),
    "clf_per_label": Key(int, 100, "images per label per class classifier"),
    "clf_epochs": Key(int, 30, ""),
    "clf_batch_size": Key(int, 32, ""),
    "clf_lr": Key(float, 0.001, ""),
    "clf_momentum": Key(float, 0.9, ""),
    "clf_weight_decay": Key(float, 5e-5, ""),
}


def parse_value(key: str, text: str):
    spec = KEYS[key]
    text = text.strip()
    try:
        if spec.type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return spec.type(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {spec.type.__name__}") from None


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


class RunConfig:
    """Effective configuration: defaults overlaid by a file, then by overrides."""

    def __init__(self, values: dict | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        key = normalize_key(key)
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = parse_value(key, value) if isinstance(value, str) else KEYS[key].type(value)

    def __getattr__(self, key):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def __getitem__(self, key):
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path:
            for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                cfg.set(key, value)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self._values.items()))

    # -- views onto the typed configs ------------------------------------

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    @property
    def corpus_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.run_path / "corpus"

    def frontend(self) -> dsp.FrontendConfig:
        base = dsp.TINY_FRONTEND if self.profile == "tiny" else dsp.REFERENCE_FRONTEND
        if self.profile not in ("tiny", "reference"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        return dsp.FrontendConfig(sample_rate=base.sample_rate,
                                  frame_ms=self.frame_ms or base.frame_ms,
                                  hop_ms=self.hop_ms or base.hop_ms,
                                  n_mels=self.n_mels or base.n_mels)

    def schema(self, f: int | None = None) -> ModelSchema:
        shape = self.frontend().shape
        try:
            return ModelSchema.for_profile(
                self.profile, self.f if f is None else f, spec_shape=shape, generator_kind=self.generator_kind,
                activation=self.activation, decoder_dropout=self.decoder_dropout,
                generator_dropout=self.generator_dropout, discriminator_dropout=self.discriminator_dropout,
                classifier_dropout=self.classifier_dropout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def training(self) -> TrainingConfig:
        try:
            return TrainingConfig(**{f.name: self._values[f.name] for f in fields(TrainingConfig)})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth(self) -> SynthConfig:
        try:
            return SynthConfig(n_classes=self.classes, scenes_per_class=self.scenes,
                               segments_per_scene=self.segments, noise_level=self.noise_level,
                               position_jitter=self.position_jitter, hue_jitter=self.hue_jitter, seed=self.seed,
                               sample_rate=self.frontend().sample_rate)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def int_list(self, key: str) -> list[int]:
        return _split(key, self._values[key], int)

    def float_list(self, key: str) -> list[float]:
        return _split(key, self._values[key], float)


def _split(key, text, typ):
    try:
        return [typ(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list, got {text!r}") from None


def _render(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)
