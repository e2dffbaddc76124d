"""Flat ``section.key = value`` engine config files."""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig
from .policies import (
    POLICY_NAMES,
    PRESETS,
    FullCachePolicy,
    HeavyHitterPolicy,
    LocalPolicy,
    PyramidPolicy,
    PyramidPolicyConfig,
    preset_schedule,
)


class ConfigError(ValueError):
    pass


def _int(v: str) -> int:
    return int(v)


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str):
    return None if v.lower() in ("none", "") else int(v)


def _int_or_list(v: str):
    parts = [p.strip() for p in v.split(",") if p.strip()]
    return int(parts[0]) if len(parts) == 1 else tuple(int(p) for p in parts)


def _schedule(v: str):
    # either "0.9,0.8,..." or "preset:<name>:<compression>"
    if v.startswith("preset:"):
        _, name, comp = v.split(":")
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}")
        return ("preset", name, float(comp))
    return tuple(float(p) for p in v.split(",") if p.strip())


MODEL_KEYS = {
    "layers": _int,
    "heads": _int,
    "head_dim": _int,
    "vocab": _int,
    "seed": _int,
    "max_seq": _int,
    "mlp_ratio": float,
    "rope_mode": str,
}
POLICY_KEYS = {
    "name": str,
    "recent_ratio": float,
    "recent_window_min": _int,
    "p0": float,
    "decay": float,
    "min_pvc_lens": _int_or_list,
    "ramp": str,
    "budget": _opt_int,
    "schedule": _schedule,
    "refresh_every": _int,
    "prune_prefill": _bool,
    "keep_first": _int,
    "window": _int,
    "hh_budget": _int,
}
RUN_KEYS = {"seed": _int, "csv": str, "trace_out": str}
SECTIONS = {"model": MODEL_KEYS, "policy": POLICY_KEYS, "run": RUN_KEYS}


@dataclass
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: dict = field(default_factory=lambda: {"name": "pyramid"})
    run: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.run.get("seed", 0))


def parse_config(text: str, source: str = "<config>") -> EngineConfig:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[section][name] = SECTIONS[section][name](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    try:
        model = ModelConfig(**values["model"])
    except ValueError as e:
        raise ConfigError(f"{source}: invalid model section: {e}") from None
    policy = {"name": "pyramid", **values["policy"]}
    if policy["name"] not in POLICY_NAMES:
        raise ConfigError(f"{source}: unknown policy name {policy['name']!r}")
    cfg = EngineConfig(model, policy, values["run"])
    try:
        build_policy(cfg, policy["name"])
    except ValueError as e:
        raise ConfigError(f"{source}: invalid policy section: {e}") from None
    return cfg


def load_config(path) -> EngineConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def pyramid_config(options: dict, layers: int) -> PyramidPolicyConfig:
    kw = {}
    for key in ("recent_ratio", "recent_window_min", "p0", "decay", "budget", "refresh_every", "prune_prefill"):
        if key in options:
            kw[key] = options[key]
    if "min_pvc_lens" in options:
        kw["min_pvc_lens"] = options["min_pvc_lens"]
    if "ramp" in options:
        kw["recency_ramp"] = options["ramp"]
    sched = options.get("schedule")
    if sched is not None:
        if sched and sched[0] == "preset":
            kw["schedule"] = tuple(preset_schedule(sched[1], layers, sched[2]))
        else:
            kw["schedule"] = sched
    return PyramidPolicyConfig(**kw)


def build_policy(cfg: EngineConfig, name: str | None = None):
    """Instantiate the named policy (default: the config's) from the policy section."""
    name = name or cfg.policy["name"]
    opts = cfg.policy
    if name == "full":
        return FullCachePolicy()
    if name == "pyramid":
        return PyramidPolicy(pyramid_config(opts, cfg.model.layers), cfg.model.layers)
    if name == "local":
        return LocalPolicy(opts.get("keep_first", 4), opts.get("window", 256))
    if name == "heavy_hitter":
        return HeavyHitterPolicy(opts.get("hh_budget", 256), opts.get("window", 64))
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
