"""Flat ``section.key=value`` pipeline configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

STAGES = ("xent", "finetune", "rl")


class ConfigError(ValueError):
    pass


# key -> (type, default); None default means optional
SCHEMA: dict[str, tuple[type, object]] = {
    "paths.work_dir": (str, "work"),
    "paths.train_src": (str, None),
    "paths.train_tgt": (str, None),
    "paths.dev_src": (str, None),
    "paths.dev_tgt": (str, None),
    "paths.test_src": (str, None),
    "paths.test_tgt": (str, None),
    "paths.finetune_src": (str, None),
    "paths.finetune_tgt": (str, None),
    "paths.phrase_table": (str, None),
    "corpus.bpe_ops": (int, 500),
    "corpus.marker": (str, "@@"),
    "corpus.threshold": (int, 5),
    "corpus.annotate": (bool, True),
    "model.d": (int, 64),
    "model.layers": (int, 1),
    "model.dropout": (float, 0.2),
    "model.input_feed": (bool, True),
    "model.copy": (bool, True),
    "model.mask_markers": (bool, False),
    "train.stages": (str, "xent,finetune,rl"),
    "train.seed": (int, 1),
    "train.batch_size": (int, 32),
    "train.clip": (float, 5.0),
    "train.xent_epochs": (int, 20),
    "train.lr": (float, 0.001),
    "train.lr_floor": (float, 0.00025),
    "train.finetune_epochs": (int, 5),
    "train.finetune_lr": (float, 0.0002),
    "train.rl_epochs": (int, 50),
    "train.rl_lr": (float, 0.0001),
    "train.rl_max_sentences": (int, 0),
    "train.alpha": (float, 0.5),
    "train.samples": (int, 1),
    "train.init_checkpoint": (str, None),
    "decode.beam": (int, 5),
    "decode.checkpoint": (str, "last"),
    "synth.n_common": (int, 120),
    "synth.n_rare": (int, 80),
    "synth.n_train": (int, 2000),
    "synth.n_dev": (int, 200),
    "synth.n_test": (int, 200),
    "synth.rare_prob": (float, 0.3),
    "synth.zipf": (float, 1.0),
    "synth.min_len": (int, 4),
    "synth.max_len": (int, 9),
    "synth.unseen_fraction": (float, 0.5),
    "synth.identical_fraction": (float, 0.25),
    "synth.error_rate": (float, 0.0),
    "synth.reorder": (bool, False),
    "synth.seed": (int, 1),
}

_PATH_KEYS = [k for k in SCHEMA if k.startswith("paths.") and k != "paths.work_dir"] + ["train.init_checkpoint"]


def _convert(key, kind, text):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


@dataclass
class PipelineConfig:
    values: dict[str, object]
    base_dir: Path = field(default_factory=Path.cwd)
    text: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key) -> Path | None:
        v = self.values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def stages(self) -> tuple[str, ...]:
        return tuple(s for s in str(self.values["train.stages"]).split(",") if s)

    def digest(self) -> str:
        canon = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def section(self, prefix: str) -> dict[str, object]:
        return {k[len(prefix) + 1 :]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def with_overrides(self, **overrides) -> "PipelineConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"{key}: unknown configuration key")
            vals[key] = v
        cfg = PipelineConfig(vals, self.base_dir, self.text)
        cfg.validate()
        return cfg

    def validate(self, check_paths: bool = True):
        v = self.values
        stages = self.stages
        if not stages or stages != STAGES[: len(stages)]:
            raise ConfigError(f"train.stages: must be a prefix of {','.join(STAGES)}, got {v['train.stages']!r}")
        for key in ("corpus.bpe_ops", "corpus.threshold", "train.xent_epochs", "train.finetune_epochs",
                    "train.rl_epochs", "train.rl_max_sentences"):
            if v[key] < 0:
                raise ConfigError(f"{key}: must be >= 0")
        for key in ("model.d", "model.layers", "train.batch_size", "train.samples", "decode.beam"):
            if v[key] < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if not 0.0 <= v["model.dropout"] < 1.0:
            raise ConfigError("model.dropout: must be in [0, 1)")
        if not 0.0 <= v["train.alpha"] <= 1.0:
            raise ConfigError("train.alpha: must be in [0, 1]")
        if not 0 < v["train.lr_floor"] <= v["train.lr"]:
            raise ConfigError("train.lr_floor: must be in (0, train.lr]")
        if v["decode.checkpoint"] not in ("last", "best"):
            raise ConfigError("decode.checkpoint: must be 'last' or 'best'")
        if (v["paths.finetune_src"] is None) != (v["paths.finetune_tgt"] is None):
            raise ConfigError("paths.finetune_src: finetune source and target must be given together")
        if check_paths:
            for key in _PATH_KEYS:
                p = self.path(key)
                if p is not None and not p.exists():
                    raise ConfigError(f"{key}: path does not exist: {p}")


def parse_config(text: str, base_dir=None, check_paths: bool = True) -> PipelineConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown configuration key (line {lineno})")
        values[key] = _convert(key, SCHEMA[key][0], value)
    cfg = PipelineConfig(values, Path(base_dir) if base_dir else Path.cwd(), text)
    cfg.validate(check_paths)
    return cfg


def load_config(path, check_paths: bool = True) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc}") from None
    return parse_config(text, path.parent, check_paths)


def dump_config(cfg: PipelineConfig) -> str:
    return "".join(f"{k}={cfg.values[k]}\n" for k in SCHEMA if cfg.values[k] is not None)
