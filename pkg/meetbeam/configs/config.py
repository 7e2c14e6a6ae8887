import json
import logging
import os
from typing import Any, Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from meetbeam.errors import ConfigError
from meetbeam.lib.stft import StftConfig
from meetbeam.modules.align import AlignConfig
from meetbeam.modules.dereverb import WpeConfig
from meetbeam.modules.mixgen import MixConfig
from meetbeam.modules.tdoa import TdoaConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "default.json")

Order = Literal["wpe-first", "beamform-first", "none"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StftSection(_Section):
    window_len: int = 512
    hop: int = 128
    window: Literal["hann", "sqrt-hann"] = "hann"
    fft_len: int = 0

    @model_validator(mode="after")
    def _check_cola(self):
        self.to_runtime()
        return self

    def to_runtime(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop, self.window, self.fft_len)


class TdoaSection(_Section):
    max_delay: int = Field(64, ge=0)
    reliability_threshold: float = Field(0.2, ge=0.0, le=1.0)
    spectral_floor: float = Field(1e-8, gt=0.0)

    def to_runtime(self) -> TdoaConfig:
        return TdoaConfig(self.max_delay, self.reliability_threshold, self.spectral_floor)


class BeamformSection(_Section):
    method: Literal["das", "mvdr"] = "das"
    ref_channel: int = Field(0, ge=0)
    loading: float = Field(1e-6, ge=0.0)


class WpeSection(_Section):
    taps: int = Field(10, ge=0)
    delay: int = Field(3, ge=1)
    iterations: int = Field(3, ge=1)
    psd_floor: float = Field(1e-10, gt=0.0)

    def to_runtime(self) -> WpeConfig:
        return WpeConfig(self.taps, self.delay, self.iterations, self.psd_floor)


class AlignSection(_Section):
    filter_len: int = Field(1024, ge=1)
    reg: float = Field(1e-6, ge=0.0)
    ref_channel: int = Field(0, ge=0)
    fast: bool = True

    def to_runtime(self) -> AlignConfig:
        return AlignConfig(self.filter_len, self.reg, self.ref_channel, self.fast)


class MixSection(_Section):
    speaker_count_weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    gain_jitter_db: float = Field(0.0, ge=0.0)
    clip_len: float = Field(4.0, gt=0.0)

    @field_validator("speaker_count_weights")
    @classmethod
    def _check_weights(cls, value):
        if any(w < 0 for w in value) or sum(value) <= 0:
            raise ValueError("speaker_count_weights must be non-negative with a positive sum")
        return value

    def to_runtime(self) -> MixConfig:
        return MixConfig(self.speaker_count_weights, self.gain_jitter_db, self.clip_len)


class PipelineConfig(_Section):
    stft: StftSection = StftSection()
    tdoa: TdoaSection = TdoaSection()
    beamform: BeamformSection = BeamformSection()
    wpe: WpeSection = WpeSection()
    align: AlignSection = AlignSection()
    mix: MixSection = MixSection()
    order: Order = "wpe-first"
    seed: int = 0
    channels: Literal[2, 8] = 8
    workers: int = Field(1, ge=1)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("%s is not valid JSON: %s" % (path, e)) from e
    if not isinstance(data, dict):
        raise ConfigError("%s must hold a JSON object" % path)
    return data


def load_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> PipelineConfig:
    """Defaults, then the JSON file at `path`, then `overrides` (CLI flags) win.

    MEETBEAM_WORKERS supplies the worker count unless the overrides set it.
    """
    data = _read_json(DEFAULT_CONFIG_PATH)
    if path:
        data = _merge(data, _read_json(path))
        logger.info("Loaded config overrides from %s", path)
    env_workers = os.getenv("MEETBEAM_WORKERS")
    if env_workers:
        try:
            data["workers"] = int(env_workers)
        except ValueError as e:
            raise ConfigError("MEETBEAM_WORKERS must be an integer, got %r" % env_workers) from e
    if overrides:
        data = _merge(data, overrides)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError("invalid configuration:\n%s" % e) from e
