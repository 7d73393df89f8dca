"""Experiment configuration: flat dotted-key text files.

The format is one ``key = value`` pair per line, ``#`` comments, blank
lines ignored. Values are scalars (int, float, bool, string) or
comma-separated lists. Unknown keys are an error so typos never pass
silently. Every run writes the fully resolved configuration (defaults
applied, overrides folded in) next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .meta_train import MetaConfig
from .stnn import ABLATIONS, ExtractorSpec, ModelConfig


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    source_dirs: tuple[str, ...] = ()
    target_dir: str = ""
    synth_source_nodes: tuple[int, ...] = ()
    synth_target_nodes: int = 0
    synth_length: int = 2016
    synth_interval: int = 30
    synth_feature_dim: int = 1
    synth_mean_degree: float = 4.0
    synth_noise: float = 0.5
    synth_phase_spread: float = 1.25
    history: int = 12
    horizon: int = 6
    stride: int = 1
    extractor: str = "gru"
    hidden_dim: int = 16
    embed_dim: int = 32
    heads: int = 2
    meta_dim: int = 16
    kernel_sizes: tuple[int, ...] = (2, 3)
    spatial_input: str = "window"
    ablation: str = "none"
    alpha: float = 0.01
    beta: float = 0.001
    lam: float = 1.5
    inner_steps: int = 1
    support_size: int = 4
    query_size: int = 4
    task_batch: int = 5
    second_order: bool = True
    episodes: int = 500
    recon_normalize: bool = True
    adapt_steps: int = 100
    adapt_batch: int = 16
    few_shot_days: int = 1
    target_stats: str = "target"
    horizons: tuple[int, ...] = (1, 3, 6)
    pretrain_steps: int = 300
    pretrain_recon: bool = True


# dotted key -> (attribute, parser tag)
KEYS = {
    "seed": ("seed", "int"),
    "out.dir": ("out_dir", "str"),
    "data.sources": ("source_dirs", "str_list"),
    "data.target": ("target_dir", "str"),
    "synth.source_nodes": ("synth_source_nodes", "int_list"),
    "synth.target_nodes": ("synth_target_nodes", "int"),
    "synth.length": ("synth_length", "int"),
    "synth.interval_minutes": ("synth_interval", "int"),
    "synth.feature_dim": ("synth_feature_dim", "int"),
    "synth.mean_degree": ("synth_mean_degree", "float"),
    "synth.noise": ("synth_noise", "float"),
    "synth.phase_spread": ("synth_phase_spread", "float"),
    "window.history": ("history", "int"),
    "window.horizon": ("horizon", "int"),
    "window.stride": ("stride", "int"),
    "model.extractor": ("extractor", "str"),
    "model.hidden_dim": ("hidden_dim", "int"),
    "model.embed_dim": ("embed_dim", "int"),
    "model.heads": ("heads", "int"),
    "model.meta_dim": ("meta_dim", "int"),
    "model.kernel_sizes": ("kernel_sizes", "int_list"),
    "model.spatial_input": ("spatial_input", "str"),
    "meta.ablation": ("ablation", "str"),
    "meta.alpha": ("alpha", "float"),
    "meta.beta": ("beta", "float"),
    "meta.lambda": ("lam", "float"),
    "meta.inner_steps": ("inner_steps", "int"),
    "meta.support_size": ("support_size", "int"),
    "meta.query_size": ("query_size", "int"),
    "meta.task_batch": ("task_batch", "int"),
    "meta.second_order": ("second_order", "bool"),
    "meta.episodes": ("episodes", "int"),
    "recon.normalize": ("recon_normalize", "bool"),
    "adapt.steps": ("adapt_steps", "int"),
    "adapt.batch_size": ("adapt_batch", "int"),
    "target.few_shot_days": ("few_shot_days", "int"),
    "target.stats": ("target_stats", "str"),
    "eval.horizons": ("horizons", "int_list"),
    "pretrain.steps": ("pretrain_steps", "int"),
    "pretrain.recon": ("pretrain_recon", "bool"),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in KEYS.items()}


def _parse_scalar(raw: str, tag: str, key: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == "str":
            return raw
        if tag == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        if tag == "str_list":
            return tuple(p.strip() for p in raw.split(",") if p.strip()) if raw else ()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {tag}") from exc
    raise ConfigError(f"unknown parser tag {tag}")


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = raw.strip()
    if overrides:
        values.update(overrides)
    cfg = ExperimentConfig()
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, tag = KEYS[key]
        setattr(cfg, attr, _parse_scalar(raw, tag, key))
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text(), overrides)


def resolved_text(cfg: ExperimentConfig) -> str:
    """Canonical text form of a configuration, one sorted key per line."""
    lines = []
    for key in sorted(KEYS):
        attr, tag = KEYS[key]
        value = getattr(cfg, attr)
        if tag in ("int_list", "str_list"):
            value = ",".join(str(v) for v in value)
        elif tag == "bool":
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def uses_synth_sources(cfg: ExperimentConfig) -> bool:
    if cfg.source_dirs and cfg.synth_source_nodes:
        raise ConfigError("configure either data.sources or synth.source_nodes, not both")
    if not cfg.source_dirs and not cfg.synth_source_nodes:
        raise ConfigError("no source cities: set data.sources or synth.source_nodes")
    return bool(cfg.synth_source_nodes)


def uses_synth_target(cfg: ExperimentConfig) -> bool:
    if cfg.target_dir and cfg.synth_target_nodes:
        raise ConfigError("configure either data.target or synth.target_nodes, not both")
    if not cfg.target_dir and not cfg.synth_target_nodes:
        raise ConfigError("no target city: set data.target or synth.target_nodes")
    return bool(cfg.synth_target_nodes)


def validate(cfg: ExperimentConfig, need_sources: bool = True, need_target: bool = True):
    """Front-load the checks a run would otherwise hit halfway through."""
    if cfg.extractor not in ("gru", "tcn"):
        raise ConfigError(f"model.extractor must be gru or tcn, got {cfg.extractor!r}")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"meta.ablation must be one of {ABLATIONS}, got {cfg.ablation!r}")
    if cfg.target_stats not in ("target", "source"):
        raise ConfigError(f"target.stats must be target or source, got {cfg.target_stats!r}")
    if any(h < 1 or h > cfg.horizon for h in cfg.horizons):
        raise ConfigError(f"eval.horizons must lie in 1..{cfg.horizon}")
    for name in ("history", "horizon", "stride", "hidden_dim", "embed_dim", "heads", "meta_dim"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{_ATTR_TO_KEY[name]} must be positive")
    if need_sources and not uses_synth_sources(cfg):
        for d in cfg.source_dirs:
            if not Path(d).is_dir():
                raise ConfigError(f"source directory {d} does not exist")
    if need_target and not uses_synth_target(cfg):
        if not Path(cfg.target_dir).is_dir():
            raise ConfigError(f"target directory {cfg.target_dir} does not exist")


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        in_dim=_feature_dim_from_dirs(cfg) if (cfg.source_dirs or cfg.target_dir) else cfg.synth_feature_dim,
        history=cfg.history,
        horizon=cfg.horizon,
        embed_dim=cfg.embed_dim,
        heads=cfg.heads,
        meta_dim=cfg.meta_dim,
        extractor=ExtractorSpec(
            kind=cfg.extractor, hidden_dim=cfg.hidden_dim, kernel_sizes=cfg.kernel_sizes
        ),
        ablation=cfg.ablation,
        spatial_input=cfg.spatial_input,
    )


def _feature_dim_from_dirs(cfg: ExperimentConfig) -> int:
    for d in cfg.source_dirs or ((cfg.target_dir,) if cfg.target_dir else ()):
        meta = Path(d) / "meta.json"
        if meta.is_file():
            return int(json.loads(meta.read_text()).get("feature_dim", 1))
    return 1


def meta_config(cfg: ExperimentConfig) -> MetaConfig:
    return MetaConfig(
        alpha=cfg.alpha,
        beta=cfg.beta,
        lam=cfg.lam,
        inner_steps=cfg.inner_steps,
        support_size=cfg.support_size,
        query_size=cfg.query_size,
        task_batch=cfg.task_batch,
        second_order=cfg.second_order,
        episodes=cfg.episodes,
        seed=cfg.seed,
        recon_normalize=cfg.recon_normalize,
        adapt_steps=cfg.adapt_steps,
        adapt_batch=cfg.adapt_batch,
    )


def synth_spec(cfg: ExperimentConfig) -> SynthSpec:
    return SynthSpec(
        source_nodes=cfg.synth_source_nodes or (20, 20, 20),
        target_nodes=cfg.synth_target_nodes or 15,
        length=cfg.synth_length,
        interval_minutes=cfg.synth_interval,
        feature_dim=cfg.synth_feature_dim,
        mean_degree=cfg.synth_mean_degree,
        noise=cfg.synth_noise,
        phase_spread=cfg.synth_phase_spread,
    )


def with_overrides(cfg: ExperimentConfig, **attrs) -> ExperimentConfig:
    return dataclasses.replace(cfg, **attrs)
