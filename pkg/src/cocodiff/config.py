"""Run configuration: nested dataclasses with a flat ``section.key = value`` text form."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace

from .dataset import GenerationSpec
from .diffusion import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .text import TextEncoderConfig


@dataclass
class TrainConfig:
    epochs: int = 90
    # None means "same as epochs"
    stage1_epochs: int | None = None
    batch_size: int = 64
    lr: float = 0.1
    # denoiser and projection head in stage 1; denoiser in stage 2
    diffusion_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-4
    warmup_epochs: int = 5
    lr_decay_epochs: tuple = (70, 80)
    lr_decay_factor: float = 0.1
    lam: float = 0.075
    tau: float = 0.07
    T: int = 30
    # None rescales the 1000-step defaults (1e-4, 0.02) to T
    beta_start: float | None = None
    beta_end: float | None = None
    shuffle_seed: int = 0
    noise_seed: int = 0
    pretrain_encoder: bool = True
    pretrain_diffusion: bool = True
    use_fine_text: bool = True
    use_coarse_text: bool = True
    normalize_targets: bool = True
    con_source: str = "generated"
    # let L_diff reach the stage-2 encoder through x_t (unstable at lr 0.1)
    diff_grad_to_encoder: bool = False
    select_best: str = "val"
    val_fraction: float = 0.0
    eval_batch_size: int = 256
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs", "must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if not self.diffusion_lr > 0:
            raise ConfigError("diffusion_lr", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be nonnegative")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs", "must be nonnegative")
        decay = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ConfigError("lr_decay_epochs", "must be strictly increasing")
        if decay and self.epochs and decay[-1] >= self.epochs:
            raise ConfigError("lr_decay_epochs", f"must be < epochs ({self.epochs})")
        if self.lam < 0:
            raise ConfigError("lam", "must be nonnegative")
        if not self.tau > 0:
            raise ConfigError("tau", "must be positive")
        if self.T < 1:
            raise ConfigError("T", "must be >= 1")
        if self.con_source not in ("generated", "encoder"):
            raise ConfigError("con_source", "must be 'generated' or 'encoder'")
        if self.select_best not in ("val", "last", "test"):
            raise ConfigError("select_best", "must be one of val, last, test")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction", "must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")


@dataclass
class RunConfig:
    generation: GenerationSpec = field(default_factory=GenerationSpec)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def resolved(self) -> "RunConfig":
        """Copy with cross-section fields made consistent (dims, class count)."""
        enc = replace(self.encoder, num_classes=self.generation.num_classes,
                      widths=tuple(self.encoder.widths), strides=tuple(self.encoder.strides))
        den = replace(self.denoiser, feature_dim=enc.feature_dim, text_embed_dim=self.text.embed_dim,
                      hidden=tuple(self.denoiser.hidden))
        return replace(self, encoder=enc, denoiser=den)

    def validate(self):
        self.generation.validate()
        self.text.validate()
        self.encoder.validate()
        self.denoiser.validate()
        self.train.validate()

    def set_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            generation=replace(self.generation, seed=seed),
            encoder=replace(self.encoder, init_seed=seed),
            denoiser=replace(self.denoiser, init_seed=seed),
            train=replace(self.train, shuffle_seed=seed, noise_seed=seed),
        )

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                for g in fields(value):
                    if g.name == "topology":
                        continue
                    out[f"{f.name}.{g.name}"] = getattr(value, g.name)
            else:
                out[f.name] = value
        return out

    def with_overrides(self, flat: dict) -> "RunConfig":
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        updates = {name: {} for name in sections}
        top = {}
        for key, raw in flat.items():
            section, _, name = key.partition(".")
            if not name:
                if section not in sections or is_dataclass(sections[section]):
                    raise ConfigError(key, "unknown configuration key")
                top[section] = _coerce(raw, sections[section], key)
                continue
            obj = sections.get(section)
            if obj is None or not is_dataclass(obj) or name not in {g.name for g in fields(obj)} \
                    or name == "topology":
                raise ConfigError(key, "unknown configuration key")
            updates[section][name] = _coerce(raw, getattr(obj, name), key)
        new = {name: replace(obj, **updates[name]) if is_dataclass(obj) else obj
               for name, obj in sections.items()}
        new.update(top)
        return RunConfig(**new)


def _scalar(text: str):
    low = text.strip().lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def _coerce(raw, current, key):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, (tuple, list)):
            parts = [p for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
            return tuple(_scalar(p) for p in parts)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if current is None:
            return _scalar(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.to_flat().items())


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        flat = parse_config_text(fh.read())
    return (base or RunConfig()).with_overrides(flat)
