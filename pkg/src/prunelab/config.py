"""Declarative run configuration: parsing, defaults, overrides, hashing.

The on-disk format is a plain text file with ``[section]`` headers and
``key = value`` lines; values are JSON literals (numbers, strings, booleans,
lists).  Every field of the run configuration is addressable, unknown keys
are errors, and the canonical echo of a config is what gets hashed and
written into run directories.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    mode: str = "from_scratch"  # from_scratch | integrated | naive | resume_ablation
    seed: int = 0
    output_dir: str = ""
    deterministic: bool = True
    eval_every: int = 0  # 0 -> 2% of total steps
    eval_tokens: int = 32768  # heldout tokens per evaluation (0 = all)
    checkpoint_at: list = field(default_factory=list)
    keep_stage_checkpoints: bool = True


@dataclass
class DataSection:
    corpus_cache: str = ""
    synthetic_docs: int = 0
    synthetic_words_per_doc: int = 0
    synthetic_seed: int = 0
    holdout_fraction: float = 0.04
    split_seed: int = 0
    batch_size: int = 32


@dataclass
class StageSection:
    pretrain_steps: int = 600
    prune_steps: int = 300
    recover_steps: int = 300

    @property
    def total_steps(self) -> int:
        return self.pretrain_steps + self.prune_steps + self.recover_steps


@dataclass
class ScheduleSection:
    peak_lr: float = 0.01
    end_lr: float = 5e-5
    warmup_steps: int = 60
    legacy_denominator: bool = False
    naive_peaks: list = field(default_factory=list)  # defaults to [peak]*3
    naive_ends: list = field(default_factory=list)
    naive_warmups: list = field(default_factory=list)


@dataclass
class PruneSection:
    method: str = "iterative_sensitivity"  # | osrp | minitron | none
    target_hidden: int = 384
    ema: float = 0.4
    combine_f1: str = "mean"
    combine_f2: str = "max"
    calibration_samples: int = 256
    calibration_batch: int = 8


@dataclass
class KDSection:
    enabled: bool = False
    teacher_checkpoint: str = ""
    alpha: float = 0.5
    tau: float = 1.0


@dataclass
class OptimSection:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0


@dataclass
class ResumeSection:
    checkpoint: str = ""
    lr_mode: str = "resumed"  # | restarted


@dataclass
class ModelSection:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_hidden: int = 1024
    vocab_size: int = 258
    seq_len: int = 128

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            ffn_hidden=self.ffn_hidden, vocab_size=self.vocab_size, seq_len=self.seq_len)


_SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "data": DataSection,
    "stages": StageSection,
    "schedule": ScheduleSection,
    "prune": PruneSection,
    "kd": KDSection,
    "optim": OptimSection,
    "resume": ResumeSection,
}

MODES = ("from_scratch", "integrated", "naive", "resume_ablation")
PRUNE_METHODS = ("iterative_sensitivity", "osrp", "minitron", "none")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    stages: StageSection = field(default_factory=StageSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    prune: PruneSection = field(default_factory=PruneSection)
    kd: KDSection = field(default_factory=KDSection)
    optim: OptimSection = field(default_factory=OptimSection)
    resume: ResumeSection = field(default_factory=ResumeSection)

    @property
    def target_sparsity(self) -> float:
        return 1.0 - self.prune.target_hidden / self.model.ffn_hidden

    def validate(self) -> None:
        if self.run.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.run.mode!r}")
        if self.prune.method not in PRUNE_METHODS:
            raise ConfigError(
                f"prune.method must be one of {PRUNE_METHODS}, got {self.prune.method!r}")
        st = self.stages
        if min(st.pretrain_steps, st.prune_steps, st.recover_steps) < 0:
            raise ConfigError("stage lengths must be >= 0")
        if st.total_steps < 1:
            raise ConfigError("total steps must be >= 1")
        if self.run.mode in ("integrated", "naive", "resume_ablation") \
                and self.prune.method != "none":
            if not 1 <= self.prune.target_hidden <= self.model.ffn_hidden:
                raise ConfigError(
                    f"prune.target_hidden {self.prune.target_hidden} not in "
                    f"[1, {self.model.ffn_hidden}]")
            if st.prune_steps < 1:
                raise ConfigError("pruning modes need stages.prune_steps >= 1")
            # the retained count at full sparsity must equal the target exactly
            import math
            r = self.target_sparsity
            if math.ceil((1.0 - r) * self.model.ffn_hidden - 1e-12) != self.prune.target_hidden:
                raise ConfigError("target_hidden inconsistent with derived sparsity")
        if not 0.0 <= self.prune.ema <= 1.0:
            raise ConfigError(f"prune.ema must be in [0, 1], got {self.prune.ema}")
        sc = self.schedule
        if sc.peak_lr < sc.end_lr or sc.end_lr < 0:
            raise ConfigError("schedule needs peak_lr >= end_lr >= 0")
        if sc.warmup_steps < 0:
            raise ConfigError("schedule.warmup_steps must be >= 0")
        for name in ("naive_peaks", "naive_ends", "naive_warmups"):
            vals = getattr(sc, name)
            if vals and len(vals) != 3:
                raise ConfigError(f"schedule.{name} must list exactly 3 values")
        if self.run.mode == "resume_ablation":
            if not self.resume.checkpoint:
                raise ConfigError("resume_ablation needs resume.checkpoint")
            if self.resume.lr_mode not in ("resumed", "restarted"):
                raise ConfigError(f"resume.lr_mode must be resumed|restarted, "
                                  f"got {self.resume.lr_mode!r}")
        if self.kd.enabled and not self.kd.teacher_checkpoint:
            raise ConfigError("kd.enabled needs kd.teacher_checkpoint")
        if not 0.0 <= self.kd.alpha <= 1.0:
            raise ConfigError(f"kd.alpha must be in [0, 1], got {self.kd.alpha}")
        if self.kd.tau <= 0.0:
            raise ConfigError(f"kd.tau must be > 0, got {self.kd.tau}")
        if self.data.batch_size < 1:
            raise ConfigError("data.batch_size must be >= 1")
        if not 0.0 < self.data.holdout_fraction < 1.0:
            raise ConfigError("data.holdout_fraction must be in (0, 1)")
        self.model.to_model_config()  # dimension checks

    # -- naive-schedule helpers -------------------------------------------
    def naive_stage_params(self) -> list[tuple[float, float, int]]:
        sc = self.schedule
        peaks = sc.naive_peaks or [sc.peak_lr] * 3
        ends = sc.naive_ends or [sc.end_lr] * 3
        warmups = sc.naive_warmups or [sc.warmup_steps] * 3
        return list(zip(peaks, ends, [int(w) for w in warmups]))


def parse_config_text(text: str) -> dict[str, dict[str, Any]]:
    """Parse ``[section]`` / ``key = value`` text with JSON literal values."""
    out: dict[str, dict[str, Any]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val  # bare string
        out[section][key] = parsed
    return out


def apply_overrides(raw: dict[str, dict[str, Any]], overrides: list[str]) -> None:
    """Apply ``section.key=value`` strings in place (values JSON-parsed)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, _, val = item.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, _, key = dotted.strip().partition(".")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        raw.setdefault(section, {})[key.strip()] = parsed


def build_run_config(raw: dict[str, dict[str, Any]]) -> RunConfig:
    """Materialize and validate a RunConfig; unknown sections/keys are errors."""
    cfg = RunConfig()
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            current = getattr(target, key)
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
            elif isinstance(current, int):
                if isinstance(value, bool):
                    raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
                if isinstance(value, float) and value.is_integer():
                    value = int(value)
                if not isinstance(value, int):
                    raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
            elif isinstance(current, float):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
                value = float(value)
            elif isinstance(current, str):
                if not isinstance(value, str):
                    raise ConfigError(f"{section}.{key} expects a string, got {value!r}")
            elif isinstance(current, list):
                if not isinstance(value, list):
                    raise ConfigError(f"{section}.{key} expects a list, got {value!r}")
            setattr(target, key, value)
    cfg.validate()
    return cfg


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        raw = parse_config_text(f.read())
    if overrides:
        apply_overrides(raw, overrides)
    return build_run_config(raw)


def canonical_config_text(cfg: RunConfig) -> str:
    """Stable, fully-populated echo of a config."""
    lines = []
    for section in sorted(_SECTIONS):
        lines.append(f"[{section}]")
        target = getattr(cfg, section)
        for f in sorted(fields(target), key=lambda f: f.name):
            value = getattr(target, f.name)
            lines.append(f"{f.name} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


def portable_config_text(cfg: RunConfig) -> str:
    """Canonical text with the output location blanked.

    This is what gets embedded in checkpoints and hashed: where a run writes
    its artifacts is not part of the trajectory's identity, so two otherwise
    identical runs in different directories stay byte-identical.
    """
    saved = cfg.run.output_dir
    cfg.run.output_dir = ""
    try:
        return canonical_config_text(cfg)
    finally:
        cfg.run.output_dir = saved


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(portable_config_text(cfg).encode("utf-8")).hexdigest()


def config_from_text(text: str, overrides: list[str] | None = None) -> RunConfig:
    raw = parse_config_text(text)
    if overrides:
        apply_overrides(raw, overrides)
    return build_run_config(raw)
