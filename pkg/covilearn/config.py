import logging
import os
from pathlib import Path
from typing import Any, Literal

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

HeadKind = Literal["gap-dense", "alg1-conv"]
ConvMethod = Literal["direct", "gemm"]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | int = "INFO") -> None:
    """Install a single stream handler on the package logger."""
    root = logging.getLogger("covilearn")
    root.setLevel(level)
    if not any(getattr(h, "_covilearn", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._covilearn = True  # type: ignore[attr-defined]
        root.addHandler(handler)


class AugmentPolicy(BaseModel):
    """Ranges each augmentation draws from. Every transform fires with `probability`."""

    model_config = ConfigDict(frozen=True)

    probability: float = Field(0.5, ge=0.0, le=1.0)
    rotation_degrees: float = Field(15.0, ge=0.0)
    shift_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    shear_degrees: float = Field(10.0, ge=0.0)
    zoom_range: tuple[float, float] = (0.9, 1.1)
    aspect_range: tuple[float, float] = (0.9, 1.1)
    brightness: float = Field(0.2, ge=0.0)
    contrast: float = Field(0.2, ge=0.0)
    crop_range: tuple[float, float] = (0.9, 1.0)
    jitter: float = Field(2.0 / 255.0, ge=0.0)
    horizontal_flip: bool = True
    vertical_flip: bool = True


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(25, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    head_kind: HeadKind = "gap-dense"
    augment: bool = False
    augment_policy: AugmentPolicy = AugmentPolicy()
    subtract_mean: bool = False
    mean_override: tuple[float, float, float] | None = None
    conv_method: ConvMethod = "direct"


class ServiceConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    address: str = "127.0.0.1:8000"
    weights_path: Path | None = None
    variant: str = "densenet121-gapdense"
    audit_log: Path = Path("screenings.jsonl")
    max_body_bytes: int = Field(32 * 1024 * 1024, gt=0)
    webhook_url: str | None = None
    webhook_retries: int = Field(3, ge=0)
    webhook_max_pending: int = Field(256, gt=0)
    conv_method: ConvMethod = "direct"
    subtract_mean: bool = False
    mean: tuple[float, float, float] | None = None

    @model_validator(mode="after")
    def _check_address(self) -> Self:
        host, _, port = self.address.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"address must look like host:port, got '{self.address}'")
        return self

    @property
    def host(self) -> str:
        return self.address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.address.rpartition(":")[2])

    @classmethod
    def from_env(cls, **overrides: Any) -> Self:
        """Defaults < CVL_* environment variables < explicit overrides (None means unset)."""
        values: dict[str, Any] = {}
        env = {"CVL_ADDR": "address", "CVL_WEIGHTS": "weights_path", "CVL_LOG": "audit_log"}
        for var, field in env.items():
            if os.environ.get(var):
                values[field] = os.environ[var]
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)
