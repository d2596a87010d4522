"""Experiment configuration: one flat, validated record per run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..datagen import REP_KINDS
from ..estimators import HeadFitConfig
from ..metalearn import MetaConfig

PROTOCOLS = ("table1", "table2_padding", "cate_fig", "ate_fixed_p", "ate_propensity", "rem_curves", "theory_ratio")

# Meta-training settings used by the simulation protocols unless overridden.
# The summed loss makes plain SGD at 1e-3 diverge at d = 300, and ReLU
# encoders memorize the historical tasks at this data size (see README).
PROTOCOL_META = {
    "optimizer": "adam",
    "inner_rate": 0.001,
    "inner_shots": 100,
    # adaptation runs on a whole sub-task (~500 points) with a summed loss;
    # scale the step so each point moves the head as much as in the inner loop
    "adapt_rate": 0.0002,
    "outer_rate": 0.001,
    "rep_rate": 0.001,
    "meta_iters": 2000,
    "encoder_activation": "identity",
}

_PROTOCOL_DEFAULTS = {
    "table1": {"s": [50, 30], "meta": {"head_class": "linear"}},
    "table2_padding": {"s": [80, 40], "d": 400, "meta": {"head_class": "linear"}},
    "cate_fig": {"s": [50], "generators": ["linear", "neural"], "meta": {"head_class": "tanh"}},
    "ate_fixed_p": {"s": [50], "generators": ["neural"], "K": 40, "meta": {"head_class": "tanh"}},
    "ate_propensity": {"s": [50], "generators": ["neural"], "K": 40, "meta": {"head_class": "tanh"}},
    "rem_curves": {},
    "theory_ratio": {"d": 500, "s": [20], "p_a": 0.001},
}


class ConfigError(ValueError):
    """Invalid or unknown configuration; maps to a usage error."""


@dataclass
class ExperimentConfig:
    protocol: str
    seed: int = 0
    out: str = "covrep_out"
    generators: list = field(default_factory=lambda: list(REP_KINDS))
    d: int = 300
    r: int = 50
    K: int = 20
    n: int = 1000
    n_target: int = 1000
    noise_sd: float = 0.1
    s: list = field(default_factory=lambda: [50])
    # design
    p_a: float = 0.01
    reps: int = 1000
    threshold_mode: str = "chisq"
    n_seeds: int = 5
    # padding
    d_range: list = field(default_factory=lambda: [100, 300])
    fill: str = "zero"
    # estimation
    shots: list = field(default_factory=lambda: [50, 100, 200, 500, 1000])
    repeats: int = 10
    n_folds: int = 5
    n_eval: int = 10_000
    head_fit: dict = field(default_factory=dict)
    # curves
    R2: float = 0.5
    dims: list = field(default_factory=lambda: list(range(2, 101)))
    meta: dict = field(default_factory=dict)
    checkpoint_every: int = 500

    @classmethod
    def build(cls, protocol: str, overrides: dict | None = None) -> "ExperimentConfig":
        """Protocol defaults, then ``overrides`` (file values, then flags)."""
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
        values = {"protocol": protocol}
        base = _PROTOCOL_DEFAULTS[protocol]
        values.update({k: v for k, v in base.items() if k != "meta"})
        meta = {**PROTOCOL_META, **base.get("meta", {})}
        overrides = dict(overrides or {})
        if "protocol" in overrides and overrides.pop("protocol") != protocol:
            raise ConfigError("config file protocol does not match the requested protocol")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        meta.update(overrides.pop("meta", None) or {})
        values.update(overrides)
        values["meta"] = meta
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def meta_config(self, s: int) -> MetaConfig:
        return MetaConfig.from_dict({**self.meta, "s": s})

    def head_config(self) -> HeadFitConfig:
        return HeadFitConfig(**self.head_fit)

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(isinstance(self.generators, list) and self.generators, "generators must be a non-empty list")
        for g in self.generators:
            need(g in REP_KINDS, f"unknown generator {g!r}; choose from {', '.join(REP_KINDS)}")
        need(isinstance(self.s, list) and self.s, "s must be a non-empty list")
        need(all(isinstance(v, int) and v >= 1 for v in self.s), "every s must be a positive integer")
        need(self.d >= 1 and 1 <= self.r <= self.d, "need 1 <= r <= d")
        need(self.K >= 1 and self.n >= 4 and self.n_target >= 4, "need K >= 1 and n, n_target >= 4")
        need(self.noise_sd >= 0, "noise_sd must be >= 0")
        need(0 < self.p_a <= 1, "p_a must lie in (0, 1]")
        need(self.reps >= 100, f"reps must be >= 100, got {self.reps}")
        need(self.threshold_mode in ("chisq", "mc"), "threshold_mode must be chisq or mc")
        need(self.n_seeds >= 1, "n_seeds must be >= 1")
        if self.protocol == "table2_padding":
            need(len(self.d_range) == 2 and 1 <= self.d_range[0] <= self.d_range[1] <= self.d, "d_range must be [lo, hi] within 1..d")
        need(self.fill in ("zero", "mean"), "fill must be zero or mean")
        need(self.shots and all(int(v) >= 4 for v in self.shots), "shots must be integers >= 4")
        need(self.repeats >= 1 and self.n_folds >= 2 and self.n_eval >= 1, "need repeats >= 1, n_folds >= 2, n_eval >= 1")
        need(0 <= self.R2 <= 1, "R2 must lie in [0, 1]")
        need(self.dims and all(int(q) >= 1 for q in self.dims), "dims must be positive integers")
        need(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        if self.protocol == "theory_ratio":
            need(all(v <= self.d for v in self.s), "theory_ratio needs s <= d")
            need(self.p_a < 1, "theory_ratio needs p_a < 1")
        try:
            for v in self.s:
                self.meta_config(v)
            self.head_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid meta or head_fit settings: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc
