"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import LOSS_KINDS, NORMALIZATIONS, RAW_KINDS
from .model import DIM_TAGS, DilationRates, DimVariant


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    variant: str = "dim_e"
    fusion: str = "sum"
    rates: str = "4,8,16"
    decoder_layers: int = 3
    backbone_channels: int = 64
    branch_channels: int = 32
    decoder_width: int = 32
    widths: str = "16,32,64"
    output_stride: int = 8
    aux_linear_decoder: bool = False
    # loss
    loss: str = "total_variation"
    norm: str = "linear"
    # optimizer and schedule
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 10
    epochs: int = 10
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 2
    # data
    data_dir: str = ""
    synth_samples: int = 512
    synth_size: int = 64
    synth_blobs: str = "1,3"
    synth_blob_sigma: float = 4.0
    synth_fixations_per_blob: int = 20
    synth_center_bias: float = 0.3
    synth_popout: bool = False
    synth_distractor_ratio: float = 0.2
    val_fraction: float = 0.2
    # run
    seed: int = 0
    dtype: str = "float32"
    out: str = "runs/train"

    def __post_init__(self):
        errors = []
        if self.variant not in DIM_TAGS:
            errors.append(f"variant: unknown {self.variant!r}")
        else:
            try:
                DimVariant(self.variant, self.fusion)
            except ValueError as exc:
                errors.append(f"fusion: {exc}")
        try:
            DilationRates.parse(self.rates)
        except (ValueError, TypeError) as exc:
            errors.append(f"rates: {exc}")
        if self.loss not in LOSS_KINDS:
            errors.append(f"loss: unknown {self.loss!r}")
        if self.norm not in NORMALIZATIONS:
            errors.append(f"norm: unknown {self.norm!r}")
        if self.loss in RAW_KINDS and self.norm != "none":
            errors.append(f"norm: {self.loss} needs norm=none")
        if self.loss == "nss_loss":
            errors.append("loss: nss_loss is an evaluation-style loss on fixations; train with a density loss")
        if not 1 <= self.decoder_layers <= 4:
            errors.append("decoder_layers: must be in 1..4")
        if self.output_stride not in (8, 32):
            errors.append("output_stride: must be 8 or 32")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        if self.epochs < 1:
            errors.append("epochs: must be >= 1")
        if not 0 <= self.val_fraction < 1:
            errors.append("val_fraction: must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            errors.append("dtype: float32 or float64")
        if self.synth_size % 8:
            errors.append("synth_size: must be divisible by 8")
        if errors:
            raise ConfigError("; ".join(errors))

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = sorted(set(kw) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError("; ".join(f"{k}: unknown config key" for k in unknown))
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items()})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, value):
    kind = _TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value.strip()


def parse_config_text(text: str) -> dict[str, str]:
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            errors.append(f"{key}: unknown config key (line {lineno})")
            continue
        values[key] = value
    if errors:
        raise ConfigError("; ".join(errors))
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    base = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = base.with_overrides(**parse_config_text(text))
    return base.with_overrides(**overrides)
