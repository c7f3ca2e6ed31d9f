"""
Flat ``key = value`` configuration for an adaptation run.

Every hyperparameter is one named key; omitted keys keep their defaults, unknown keys are errors.
"""
import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from ttaforge.errors import ConfigError
from ttaforge.idm.enhance import PRESETS

# Keys a benchmark preset may set, with their values when no preset applies
PRESET_DEFAULTS = {"alpha": 5.0, "beta": 5.0, "gamma": 0.999}

# Per-benchmark overrides. "shapes" is the synthetic 200-image stream, 50 steps at batch size 4; with gamma 0.95 the
# teacher keeps 0.95**50 < 0.1 of its starting prompts by the end of the stream.
BENCHMARK_PRESETS = {
    **{name: {"alpha": alpha, "beta": beta} for name, (alpha, beta) in PRESETS.items()},
    "shapes": {"alpha": 5.0, "beta": 5.0, "gamma": 0.95},
}

VISUAL_INITS = ("warm", "random", "zero")
EVAL_MODELS = ("teacher", "student")
EXECUTORS = ("local", "sync", "distributed")

_SECTION = "ttaforge"


@dataclass(frozen=True)
class AdaptationConfig:
    # pseudo-labels and EMA
    th_pl: float = 0.3
    th_me: float = 0.3
    gamma: Optional[float] = None
    m: int = 10
    capacity: int = 20
    alpha: Optional[float] = None
    beta: Optional[float] = None
    # optimizer
    lr_text: float = 0.02
    lr_visual: float = 0.2
    batch_size: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    nms_iou: float = 0.5
    # hallucination
    th_iou: float = 0.2
    max_instances: int = 3
    max_retries: int = 10
    mix_beta_a: float = 8.0
    mix_beta_b: float = 2.0
    scale_lo: float = 0.5
    scale_hi: float = 1.5
    # augmentation
    resize_scales: Tuple[int, ...] = (64, 80, 96)
    max_erase: int = 4
    erase_fill: float = 0.5
    warm_start_noise: float = 1e-4
    # ablations
    visual_init: str = "warm"
    use_text_prompt: bool = True
    use_visual_prompt: bool = True
    use_prompt_tuning: bool = True
    use_enhancement: bool = True
    use_hallucination: bool = True
    eval_model: str = "teacher"
    eval_nms_iou: float = 0.5
    eval_max_detections: int = 100
    # toy backend
    patch_size: int = 8
    dim: int = 32
    embed_dim: int = 64
    backend_seed: int = 0
    pretrain_images: int = 120
    executor: str = "local"
    preset: str = "none"

    def __post_init__(self):
        _check("preset", self.preset == "none" or self.preset in BENCHMARK_PRESETS,
               f"must be none or one of {sorted(BENCHMARK_PRESETS)}")
        # unset preset keys come from the preset, explicit ones win
        for key, value in self.preset_values().items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        for key in ("th_pl", "th_me", "gamma", "nms_iou", "th_iou", "eval_nms_iou", "erase_fill"):
            _check(key, 0.0 <= getattr(self, key) <= 1.0, "must lie in [0, 1]")
        for key in ("lr_text", "lr_visual", "alpha", "beta", "adam_eps", "mix_beta_a", "mix_beta_b", "scale_lo"):
            _check(key, getattr(self, key) > 0, "must be positive")
        for key in ("adam_beta1", "adam_beta2"):
            _check(key, 0.0 <= getattr(self, key) < 1.0, "must lie in [0, 1)")
        for key in ("batch_size", "capacity", "max_instances", "max_retries", "patch_size", "dim", "embed_dim"):
            _check(key, getattr(self, key) >= 1, "must be at least 1")
        for key in ("m", "max_erase", "pretrain_images", "eval_max_detections"):
            _check(key, getattr(self, key) >= 0, "must be non-negative")
        _check("weight_decay", self.weight_decay >= 0, "must be non-negative")
        _check("scale_hi", self.scale_hi >= self.scale_lo, "must not be below scale_lo")
        _check("resize_scales", len(self.resize_scales) > 0, "must name at least one size")
        for scale in self.resize_scales:
            _check("resize_scales", scale > 0 and scale % self.patch_size == 0, "must be multiples of patch_size")
        _check("visual_init", self.visual_init in VISUAL_INITS, f"must be one of {VISUAL_INITS}")
        _check("eval_model", self.eval_model in EVAL_MODELS, f"must be one of {EVAL_MODELS}")
        _check("executor", self.executor in EXECUTORS, f"must be one of {EXECUTORS}")

    @property
    def effective_m(self) -> int:
        return self.m if self.use_visual_prompt else 0

    def preset_values(self) -> Dict[str, float]:
        """Values of the preset keys under this config's ``preset`` (defaults for ``none``)."""
        return {**PRESET_DEFAULTS, **BENCHMARK_PRESETS.get(self.preset, {})}

    def replace(self, **changes) -> "AdaptationConfig":
        """
        Copy with ``changes`` applied. Changing ``preset`` re-resolves the preset keys that still hold the old preset's
        value; keys set to something else, or passed in ``changes``, are kept.
        """
        unknown = set(changes) - set(field_names())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        if changes.get("preset", self.preset) != self.preset:
            for key, value in self.preset_values().items():
                if key not in changes and getattr(self, key) == value:
                    changes[key] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AdaptationConfig":
        """Build from raw (string or typed) values; ``preset`` fills alpha, beta and gamma unless they are given."""
        defaults = {f.name: PRESET_DEFAULTS.get(f.name, f.default) for f in dataclasses.fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in defaults:
                raise ConfigError(key, "unknown configuration key")
            parsed[key] = _parse(key, raw, defaults[key])
        return cls(**parsed)

    @classmethod
    def from_text(cls, text: str) -> "AdaptationConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        # keys are case sensitive
        parser.optionxform = str
        try:
            parser.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as ex:
            raise ConfigError("<file>", str(ex).splitlines()[0])
        return cls.from_dict(dict(parser[_SECTION]))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AdaptationConfig":
        try:
            text = Path(path).read_text()
        except OSError as ex:
            raise ConfigError(str(path), f"cannot read configuration ({ex.strerror})")
        return cls.from_text(text)


def field_names():
    return [f.name for f in dataclasses.fields(AdaptationConfig)]


def _check(key: str, condition: bool, message: str):
    if not condition:
        raise ConfigError(key, message)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(key: str, raw, default):
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}")
