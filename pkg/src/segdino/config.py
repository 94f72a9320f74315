"""Run configuration: ``section.key = value`` text files.

Lines starting with ``#`` and blank lines are ignored. Tuples are
comma-separated; ``none`` means "use the derived default". Any key not in
the file keeps its default, and :func:`format_config` prints every key so
the echoed text parses back to the same :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from segdino.data import DEFAULT_MEAN, DEFAULT_STD, SynthConfig
from segdino.decoder import DecoderConfig
from segdino.encoder import EncoderConfig
from segdino.errors import ConfigError
from segdino.metrics import HD95_CONVENTION
from segdino.trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: str | None = None
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD
    train_fraction: float = 0.8


@dataclass(frozen=True)
class MetricsConfig:
    beta_sq: float = 0.3
    threshold: float = 0.5
    hd95_convention: str = HD95_CONVENTION


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/default"

    def violations(self) -> list[str]:
        out = []
        enc, dec = self.encoder, self.decoder
        if dec.tap_count != len(enc.tap_layers):
            out.append(f"decoder.tap_count={dec.tap_count} must equal the number of encoder.tap_layers ({len(enc.tap_layers)})")
        if dec.loss_resolution != self.train.loss_resolution:
            out.append(
                f"decoder.loss_resolution={dec.loss_resolution!r} and train.loss_resolution={self.train.loss_resolution!r} must agree"
            )
        if self.data.manifest is None:
            s = self.data.synth.size
            if (s, s) != (enc.image_h, enc.image_w):
                out.append(f"data.size={s} must equal the encoder input size {enc.image_h}x{enc.image_w}")
        hc, wc = dec.grid_for(enc)
        if self.train.loss_resolution == "token" and (enc.image_h % hc or enc.image_w % wc):
            out.append(f"token-resolution loss needs decoder.common_grid ({hc}, {wc}) to divide the image size")
        if not 0 < self.data.train_fraction < 1:
            out.append(f"data.train_fraction must lie in (0, 1) (got {self.data.train_fraction})")
        if len(self.data.mean) != 3 or len(self.data.std) != 3 or min(self.data.std) <= 0:
            out.append("data.mean and data.std need three values each, std > 0")
        if self.metrics.beta_sq <= 0:
            out.append(f"metrics.beta_sq must be > 0 (got {self.metrics.beta_sq})")
        if not 0 <= self.metrics.threshold <= 1:
            out.append(f"metrics.threshold must lie in [0, 1] (got {self.metrics.threshold})")
        return out

    def validate(self) -> "RunConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self


# --------------------------------------------------------------------------- (de)serialisation


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return s


def _opt(conv):
    return lambda s: None if s.lower() == "none" or s == "" else conv(s)


def _tuple(conv):
    return lambda s: tuple(conv(x.strip()) for x in s.split(",") if x.strip())


# section -> key -> value parser
_SCHEMA = {
    "encoder": {
        "image_h": _int, "image_w": _int, "patch_size": _int, "embed_dim": _int, "depth": _int,
        "heads": _int, "mlp_ratio": _float, "tap_layers": _tuple(_int), "n_register_tokens": _int, "seed": _int,
    },
    "decoder": {
        "common_channels": _int, "tap_count": _int, "hidden_dim": _opt(_int), "n_class": _int,
        "common_grid": _opt(_tuple(_int)),
    },
    "train": {
        "learning_rate": _float, "weight_decay": _float, "beta1": _float, "beta2": _float, "eps_adam": _float,
        "batch_size": _int, "epochs": _int, "seed": _int, "loss_resolution": _str, "class_weighting": _str,
        "dtype": _str,
    },
    "data": {
        "manifest": _opt(_str), "mean": _tuple(_float), "std": _tuple(_float), "train_fraction": _float,
        "n_samples": _int, "size": _int, "shapes": _tuple(_str), "noise_std": _float, "texture": _str,
        "seed": _int, "min_shapes": _int, "max_shapes": _int, "min_extent": _float, "max_extent": _float,
    },
    "metrics": {"beta_sq": _float, "threshold": _float, "hd95_convention": _str},
    "output": {"dir": _str},
}

_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}


def _flatten(cfg: RunConfig) -> dict[str, dict]:
    def fields_of(obj):
        return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}

    data = {"manifest": cfg.data.manifest, "mean": cfg.data.mean, "std": cfg.data.std,
            "train_fraction": cfg.data.train_fraction}
    data.update(fields_of(cfg.data.synth))
    return {
        "encoder": fields_of(cfg.encoder),
        "decoder": fields_of(cfg.decoder),
        "train": fields_of(cfg.train),
        "data": data,
        "metrics": fields_of(cfg.metrics),
        "output": {"dir": cfg.output_dir},
    }


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in _flatten(cfg).items():
        for key in _SCHEMA[section]:
            lines.append(f"{section}.{key} = {_fmt(values[key])}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None, validate: bool = True) -> RunConfig:
    """Parse config text on top of ``base`` (defaults if omitted)."""
    flat = _flatten(base or RunConfig())
    errors = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"line {n}: expected 'section.key = value', got {raw!r}")
            continue
        lhs, value = (p.strip() for p in line.split("=", 1))
        section, _, key = lhs.partition(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            errors.append(f"line {n}: unknown key {lhs!r}")
            continue
        try:
            flat[section][key] = _SCHEMA[section][key](value)
        except ValueError as exc:
            errors.append(f"line {n}: bad value for {lhs}: {exc}")
    if errors:
        raise ConfigError(errors)
    return build(flat, validate)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str], validate: bool = True) -> RunConfig:
    text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
    return parse_config(text, base=cfg, validate=validate)


def build(flat: dict[str, dict], validate: bool = True) -> RunConfig:
    """Construct every section, collecting all violations before raising."""
    errors: list[str] = []

    def make(cls, kwargs):
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            errors.extend(exc.violations)
        except TypeError as exc:
            errors.append(str(exc))
        return None

    d = flat["data"]
    # one switch for both sections; the file only carries train.loss_resolution
    flat["decoder"]["loss_resolution"] = flat["train"]["loss_resolution"]
    enc = make(EncoderConfig, flat["encoder"])
    dec = make(DecoderConfig, flat["decoder"])
    tr = make(TrainConfig, flat["train"])
    synth = make(SynthConfig, {k: v for k, v in d.items() if k in _SYNTH_KEYS})
    if errors:
        raise ConfigError(errors)
    data = DataConfig(synth, d["manifest"], tuple(d["mean"]), tuple(d["std"]), d["train_fraction"])
    cfg = RunConfig(enc, dec, tr, data, MetricsConfig(**flat["metrics"]), flat["output"]["dir"])
    return cfg.validate() if validate else cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


PAPER_DEFAULTS = {
    # 256x256 inputs, 12-block ViT-S/16 shape, taps 3/6/9/12
    "encoder.image_h": "256",
    "encoder.image_w": "256",
    "encoder.patch_size": "16",
    "encoder.embed_dim": "384",
    "encoder.heads": "6",
    "encoder.depth": "12",
    "encoder.tap_layers": "3, 6, 9, 12",
    "decoder.tap_count": "4",
    "data.size": "256",
    "train.learning_rate": "0.0001",
    "train.weight_decay": "0.0001",
    "train.epochs": "50",
    "train.batch_size": "4",
}


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Set every seed (encoder init, decoder init / shuffling, data) to ``seed``."""
    return replace(
        cfg,
        encoder=replace(cfg.encoder, seed=seed),
        train=replace(cfg.train, seed=seed),
        data=replace(cfg.data, synth=replace(cfg.data.synth, seed=seed)),
    )
