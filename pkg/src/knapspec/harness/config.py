"""Experiment configuration: flat key/value text whose keys carry their units.

Example file::

    [experiment]
    num_blocks = 4
    hidden_dim = 32
    max_new_tokens = 128
    interval_tokens = 64
    attn_slope_ms_per_token = 0.0002
    redundancy = 1.0 0.05 1.0 0.05 1.0 1.0 0.05 1.0

Unknown keys or sections are errors, never silently ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..engine import EngineConfig
from ..errors import ConfigError, KnapSpecError
from ..latency import LatencyProfile, load_profile
from ..model import ModelConfig, ToyModel
from ..tensorio import load_weights

SECTION = "experiment"


@dataclass
class ExperimentConfig:
    # model
    num_blocks: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 256
    max_seq_tokens: int = 1024
    weights_path: str = ""
    model_seed: int = 0
    head_gain: float = 4.0
    resid_gain: float = -1.0  # negative: 1/sqrt(2L)
    # Explicit per-sub-layer branch scales win over the generated modes:
    # "binary" scales a random redundancy_frac of sub-layers to redundancy_low,
    # "loguniform" draws every scale from [redundancy_low, 1] on a log scale.
    redundancy: tuple[float, ...] = ()
    redundancy_mode: str = "none"
    redundancy_low: float = 0.02
    redundancy_frac: float = 0.25
    # prompt
    prompt: str = "the quick brown fox"
    prompt_file: str = ""
    prompt_random_tokens: int = 0  # > 0: seeded random prompt instead of text
    max_new_tokens: int = 128
    # engine
    max_draft_tokens: int = 10
    tau_conf: float = 0.7
    tau: float = 0.5
    prune: bool = True
    history_steps: int = 5
    interval_tokens: int = 64
    clock: str = "simulated"
    optimizer_charge_ms: float = -1.0  # negative: charge K * t_mlp
    # latency profile
    profile_path: str = ""
    attn_slope_ms_per_token: float = 0.0002
    attn_intercept_ms: float = 0.05
    mlp_const_ms: float = 0.5
    context_offset_tokens: int = 0  # added to the live context length for latency
    # sweeps
    context_lengths_tokens: tuple[int, ...] = (1024, 2048, 4096, 8192, 16384, 32768)
    thresholds: tuple[float, ...] = (0.5, -1.0)
    intervals_tokens: tuple[int, ...] = (4, 16, 64, 256)
    num_configs: int = 32
    warm_tokens: int = 32
    history_rows: int = 32
    # output
    output_dir: str = "out"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _coerce(f, getattr(self, f.name)))
        if self.redundancy and len(self.redundancy) != 2 * self.num_blocks:
            raise ConfigError(f"redundancy needs {2 * self.num_blocks} values, got {len(self.redundancy)}")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.redundancy_mode not in ("none", "binary", "loguniform"):
            raise ConfigError(f"unknown redundancy_mode {self.redundancy_mode!r}")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_config_file(path))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def dump(self, path) -> None:
        cp = configparser.ConfigParser()
        cp[SECTION] = {f.name: _render(getattr(self, f.name)) for f in fields(self)}
        with open(path, "w") as fh:
            cp.write(fh)

    # -- derived objects ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(L=self.num_blocks, d=self.hidden_dim, n_heads=self.num_heads,
                           d_ff=self.ffn_dim, V=self.vocab_size, max_seq=self.max_seq_tokens)

    def build_model(self) -> ToyModel:
        try:
            if self.weights_path:
                if not Path(self.weights_path).exists():
                    raise ConfigError(f"weights file not found: {self.weights_path}")
                return load_weights(self.weights_path)
            return ToyModel.random(self.model_config(), self.model_seed, head_gain=self.head_gain,
                                   branch_scale=self.branch_scales(),
                                   resid_gain=None if self.resid_gain < 0 else self.resid_gain)
        except ConfigError:
            raise
        except KnapSpecError as exc:
            raise ConfigError(f"cannot build model: {exc}") from None

    def branch_scales(self) -> tuple[float, ...] | None:
        if self.redundancy:
            return self.redundancy
        if self.redundancy_mode == "none":
            return None
        return redundancy_knobs(self.num_blocks, self.model_seed, self.redundancy_mode,
                                self.redundancy_low, self.redundancy_frac)

    def build_profile(self) -> LatencyProfile:
        if self.profile_path:
            if not Path(self.profile_path).exists():
                raise ConfigError(f"profile file not found: {self.profile_path}")
            return load_profile(self.profile_path)
        try:
            return LatencyProfile(self.attn_slope_ms_per_token, self.attn_intercept_ms, self.mlp_const_ms)
        except KnapSpecError as exc:
            raise ConfigError(str(exc)) from None

    def engine(self, method: str = "knapspec", **changes) -> EngineConfig:
        kw = dict(D=self.max_draft_tokens, tau_conf=self.tau_conf, tau=self.tau, prune=self.prune,
                  m=self.history_steps, T=self.interval_tokens, clock=self.clock,
                  optimizer_charge_ms=None if self.optimizer_charge_ms < 0 else self.optimizer_charge_ms,
                  method=method, context_offset=self.context_offset_tokens)
        kw.update(changes)
        try:
            return EngineConfig(**kw)
        except KnapSpecError as exc:
            raise ConfigError(str(exc)) from None

    def prompt_tokens(self) -> list[int]:
        """Seeded random tokens, else the byte-tokenised file, else the inline string."""
        if self.prompt_random_tokens > 0:
            rng = np.random.default_rng(self.seed)
            return rng.integers(0, self.vocab_size, self.prompt_random_tokens).tolist()
        if self.prompt_file:
            p = Path(self.prompt_file)
            if not p.exists():
                raise ConfigError(f"prompt file not found: {self.prompt_file}")
            data = p.read_bytes()
        else:
            data = self.prompt.encode("utf-8")
        if not data:
            raise ConfigError("prompt is empty")
        if self.vocab_size < 256:
            raise ConfigError(f"byte prompts need vocab_size >= 256, got {self.vocab_size}")
        return list(data)

    def require_axis(self, name: str) -> tuple:
        axis = getattr(self, name)
        if not axis:
            raise ConfigError(f"sweep axis {name} is empty")
        return axis


def read_config_file(path) -> dict[str, str]:
    """Raw key/value pairs of the single ``[experiment]`` section."""
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extra = [s for s in cp.sections() if s != SECTION]
    if extra or SECTION not in cp:
        raise ConfigError(f"{path}: expected exactly one [{SECTION}] section")
    return dict(cp[SECTION])


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            if isinstance(value, str):
                value = value.replace(",", " ").split()
            elem = float if "float" in kind else int
            return tuple(elem(v) for v in value)
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None


def _render(value) -> str:
    if isinstance(value, tuple):
        return " ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_fields() -> list[dataclasses.Field]:
    return list(fields(ExperimentConfig))


def redundancy_knobs(L: int, seed: int, mode: str, low: float, frac: float) -> tuple[float, ...]:
    rng = np.random.default_rng(seed)
    if mode == "binary":
        knobs = np.where(rng.random(2 * L) < frac, low, 1.0)
    elif mode == "loguniform":
        knobs = np.exp(rng.uniform(np.log(low), 0.0, 2 * L))
    else:
        raise ConfigError(f"unknown redundancy_mode {mode!r}")
    return tuple(float(v) for v in knobs)


# Desk-scale settings for each analysis.  Long contexts are emulated through
# the latency offset; the binary-knob stream uses a long random prompt because
# short prompts drive random toy models into short greedy loops.
_STREAM = dict(num_blocks=6, hidden_dim=32, num_heads=2, ffn_dim=64, vocab_size=256, max_seq_tokens=1024,
               head_gain=4.0, resid_gain=2.0, context_offset_tokens=4096,
               attn_slope_ms_per_token=0.0002, attn_intercept_ms=0.05, mlp_const_ms=0.5,
               model_seed=1, seed=1)

PRESETS: dict[str, dict] = {
    "correlation": dict(_STREAM, redundancy_mode="loguniform", redundancy_low=0.01,
                        max_new_tokens=64, num_configs=32, warm_tokens=32, history_rows=32),
    "context": dict(_STREAM, num_blocks=8, redundancy_mode="loguniform", redundancy_low=0.01,
                    warm_tokens=80, history_rows=64),
    "threshold": dict(_STREAM, redundancy_mode="binary", redundancy_frac=0.25, prompt_random_tokens=200,
                      max_new_tokens=128, interval_tokens=16, thresholds=(0.5, -1.0)),
    "interval": dict(_STREAM, redundancy_mode="binary", redundancy_frac=0.5, prompt_random_tokens=200,
                     max_new_tokens=512, intervals_tokens=(4, 16, 64, 256)),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return ExperimentConfig(**{**PRESETS[name], **overrides})
