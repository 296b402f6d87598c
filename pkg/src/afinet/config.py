"""Plain key-value experiment configuration.

One human-readable file drives a whole experiment (synthesis, training,
evaluation), because runs here are multi-stage and must be reproducible
from a single artifact. Format: `key = value` lines, `#` comments; pairs
and lists are comma-separated. The canonical serialization (sorted keys)
is hashed into a digest that every output artifact carries, and that
resume/report operations verify.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .train import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file or key set."""


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def parse_kv_file(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_kv_text(f.read(), source=str(path))


def canonical_text(kv: dict) -> str:
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))


def config_digest(kv: dict) -> str:
    return hashlib.sha256(canonical_text(kv).encode("utf-8")).hexdigest()[:16]


def _get(kv, key, cast, default):
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return cast(kv[key])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"key {key!r}: {e}")


def _pair(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _strlist(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _floatlist(text):
    return tuple(float(p) for p in text.split(",") if p.strip())


GENERATOR_KEYS = ("classes", "samples_per_class", "train_classes",
                  "rotation_range_deg", "dilation_range", "noise_std",
                  "shading_amp", "seed")


@dataclass(frozen=True)
class GeneratorSettings:
    classes: int = 4
    samples_per_class: int = 4
    train_classes: int | None = None    # default: half of classes
    rotation_range_deg: tuple = (0.0, 0.0)
    dilation_range: tuple = (0.0, 0.0)
    noise_std: float = 0.0
    shading_amp: float = 0.0
    seed: int = 0

    @property
    def n_train_classes(self) -> int:
        n = self.train_classes if self.train_classes is not None \
            else self.classes // 2
        if not 0 < n < self.classes:
            raise ConfigError(
                f"train_classes {n} must leave at least one test class "
                f"out of {self.classes}")
        return n

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "") -> "GeneratorSettings":
        def k(name):
            return prefix + name

        for key in kv:
            if key.startswith(prefix) \
                    and key[len(prefix):] not in GENERATOR_KEYS:
                raise ConfigError(f"unknown generator key {key!r}")
        return cls(
            classes=_get(kv, k("classes"), int, 4),
            samples_per_class=_get(kv, k("samples_per_class"), int, 4),
            train_classes=_get(kv, k("train_classes"), int, 0) or None,
            rotation_range_deg=_get(kv, k("rotation_range_deg"), _pair,
                                    (0.0, 0.0)),
            dilation_range=_get(kv, k("dilation_range"), _pair, (0.0, 0.0)),
            noise_std=_get(kv, k("noise_std"), float, 0.0),
            shading_amp=_get(kv, k("shading_amp"), float, 0.0),
            seed=_get(kv, k("seed"), int, 0),
        )

    def to_kv(self) -> dict:
        return {
            "classes": str(self.classes),
            "samples_per_class": str(self.samples_per_class),
            "train_classes": str(self.n_train_classes),
            "rotation_range_deg": f"{self.rotation_range_deg[0]},"
                                  f"{self.rotation_range_deg[1]}",
            "dilation_range": f"{self.dilation_range[0]},"
                              f"{self.dilation_range[1]}",
            "noise_std": str(self.noise_std),
            "shading_amp": str(self.shading_amp),
            "seed": str(self.seed),
        }


_EXPERIMENT_KEYS = {
    "seed", "output_dir", "dataset.manifest",
    "model.alpha", "model.kmeans_sample",
    "train.lr_extractor", "train.lr_vlad_head", "train.momentum",
    "train.weight_decay", "train.lr_decay_factor", "train.plateau_patience",
    "train.batch_size", "train.max_epochs", "train.pretrain_epochs",
    "train.val_fraction", "train.augment_rotation_deg",
    "eval.regimes", "eval.genuine_pairs", "eval.impostor_pairs",
    "eval.far_levels", "eval.baselines", "eval.shift_range",
}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    generator: GeneratorSettings | None
    manifest_path: str | None
    alpha: float
    kmeans_sample: int
    train: TrainConfig
    val_fraction: float
    regimes: tuple
    genuine_pairs: int
    impostor_pairs: int
    far_levels: tuple
    baselines: tuple
    shift_range: int
    digest: str
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_kv(cls, kv: dict) -> "ExperimentConfig":
        for key in kv:
            if key in _EXPERIMENT_KEYS or key.startswith("dataset.synth."):
                continue
            raise ConfigError(f"unknown key {key!r}")
        has_synth = any(k.startswith("dataset.synth.") for k in kv)
        has_manifest = "dataset.manifest" in kv
        if has_synth == has_manifest:
            raise ConfigError("exactly one dataset source required: either "
                              "dataset.synth.* keys or dataset.manifest")
        generator = None
        if has_synth:
            synth_kv = {k: v for k, v in kv.items()
                        if k.startswith("dataset.synth.")}
            generator = GeneratorSettings.from_kv(synth_kv, "dataset.synth.")
            if "dataset.synth.seed" not in kv:
                generator = GeneratorSettings(
                    **{**generator.__dict__,
                       "seed": _get(kv, "seed", int, 0)})
        seed = _get(kv, "seed", int, 0)
        train = TrainConfig(
            lr_extractor=_get(kv, "train.lr_extractor", float, 1e-4),
            lr_vlad_head=_get(kv, "train.lr_vlad_head", float, 1e-2),
            momentum=_get(kv, "train.momentum", float, 0.9),
            weight_decay=_get(kv, "train.weight_decay", float, 1e-4),
            lr_decay_factor=_get(kv, "train.lr_decay_factor", float, 10.0),
            plateau_patience=_get(kv, "train.plateau_patience", int, 2),
            batch_size=_get(kv, "train.batch_size", int, 16),
            max_epochs=_get(kv, "train.max_epochs", int, 8),
            pretrain_epochs=_get(kv, "train.pretrain_epochs", int, 3),
            seed=seed,
            augment_rotation_deg=_get(kv, "train.augment_rotation_deg",
                                      _pair, (0.0, 0.0)),
        )
        train.validate()
        regimes = _get(kv, "eval.regimes", _strlist, ("none",))
        from .metrics import REGIMES
        for r in regimes:
            if r not in REGIMES:
                raise ConfigError(f"eval.regimes: unknown regime {r!r}")
        baselines = _get(kv, "eval.baselines", _strlist, ())
        for b in baselines:
            if b not in ("loggabor", "ordinal"):
                raise ConfigError(f"eval.baselines: unknown encoder {b!r}")
        return cls(
            seed=seed,
            output_dir=_get(kv, "output_dir", str, None),
            generator=generator,
            manifest_path=kv.get("dataset.manifest"),
            alpha=_get(kv, "model.alpha", float, 1.0),
            kmeans_sample=_get(kv, "model.kmeans_sample", int, 5000),
            train=train,
            val_fraction=_get(kv, "train.val_fraction", float, 0.2),
            regimes=regimes,
            genuine_pairs=_get(kv, "eval.genuine_pairs", int, 1000),
            impostor_pairs=_get(kv, "eval.impostor_pairs", int, 2000),
            far_levels=_get(kv, "eval.far_levels", _floatlist,
                            (1e-2, 1e-3, 1e-4)),
            baselines=baselines,
            shift_range=_get(kv, "eval.shift_range", int, 8),
            digest=config_digest(kv),
            raw=dict(kv),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_kv(parse_kv_file(path))
