"""Flat ``key = value`` run configuration with last-wins overrides."""

import dataclasses
import json
from dataclasses import dataclass, fields

from .data import SyntheticConfig
from .losses import LossWeights
from .model import ModelConfig
from .pcmi import CONDITIONS, PROMPT_VARIANTS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    n_train: int = 512
    n_test: int = 128
    T: int = 8
    latent_dim: int = 8
    d_v: int = 16
    d_f: int = 16
    d_a: int = 16
    noise_v: float = 0.3
    noise_f: float = 0.3
    noise_a: float = 0.3
    mask_distribution: str = "uniform"  # or "vf:0.2,v:0.8"
    data_seed: int = 0
    xi: float = 100.0
    # model
    K: int = 4
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    lora_targets: str = "q,k,v,o"
    backbone_dropout: float = 0.0
    dropout_rate: float = 0.15
    mda_hidden: int = 0
    mda_heads: int = 4
    lambda_m_init: float = 0.6
    lambda_syn_init: float = 0.7
    prompt_variant: str = "full"
    special_tokens: bool = True
    use_backbone: bool = True
    use_pcmi: bool = True
    use_lmrf: bool = True
    use_mda: bool = True
    path1_only: bool = False
    path2_only: bool = False
    full_finetune: bool = False
    dtype: str = "float64"
    # training
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    lr_min_ratio: float = 0.1
    seed: int = 1
    w_task: float = 10.0
    w_con: float = 1.0
    w_reg: float = 1.0
    margin: float = 1.0
    use_consistency: bool = True
    use_metric_reg: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.prompt_variant not in PROMPT_VARIANTS:
            raise ConfigError(f"prompt_variant must be one of {sorted(PROMPT_VARIANTS)}, got {self.prompt_variant!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        parse_mask_distribution(self.mask_distribution)

    # -- views ---------------------------------------------------------------

    def synthetic(self):
        return SyntheticConfig(
            num_samples=self.n_train,
            T=self.T,
            latent_dim=self.latent_dim,
            dims={"v": self.d_v, "f": self.d_f, "a": self.d_a},
            noise_sigma={"v": self.noise_v, "f": self.noise_f, "a": self.noise_a},
            mask_distribution=parse_mask_distribution(self.mask_distribution),
            seed=self.data_seed,
            xi=self.xi,
        )

    def model(self, dims=None, T=None):
        return ModelConfig(
            dims=dims or {"v": self.d_v, "f": self.d_f, "a": self.d_a},
            T=T or self.T,
            K=self.K,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            model_dim=self.model_dim,
            ffn_dim=self.ffn_dim,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            lora_dropout=self.lora_dropout,
            lora_targets=tuple(t for t in self.lora_targets.split(",") if t),
            backbone_dropout=self.backbone_dropout,
            dropout_rate=self.dropout_rate,
            mda_hidden=self.mda_hidden,
            mda_heads=self.mda_heads,
            lambda_m_init=self.lambda_m_init,
            lambda_syn_init=self.lambda_syn_init,
            prompt_variant=self.prompt_variant,
            special_tokens=self.special_tokens,
            use_backbone=self.use_backbone,
            use_pcmi=self.use_pcmi,
            use_lmrf=self.use_lmrf,
            use_mda=self.use_mda,
            path1_only=self.path1_only,
            path2_only=self.path2_only,
            full_finetune=self.full_finetune,
            dtype=self.dtype,
            seed=self.seed,
        )

    def train(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            clip_norm=self.clip_norm,
            lr_min_ratio=self.lr_min_ratio,
            seed=self.seed,
            loss=LossWeights(self.w_task, self.w_con, self.w_reg, self.margin),
            use_consistency=self.use_consistency,
            use_metric_reg=self.use_metric_reg,
            checkpoint_every=self.checkpoint_every,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def parse_mask_distribution(text):
    if text == "uniform":
        return {c: 1.0 / len(CONDITIONS) for c in CONDITIONS}
    out = {}
    for item in text.split(","):
        name, _, prob = item.partition(":")
        name = name.strip()
        if name not in CONDITIONS or not prob:
            raise ConfigError(f"mask_distribution entry {item!r} must look like 'vf:0.25' with a subset of vfa")
        out[name] = float(prob)
    total = sum(out.values())
    if abs(total - 1.0) > 1e-12:
        raise ConfigError(f"mask_distribution probabilities sum to {total!r}, not 1")
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, raw):
    typ = _FIELDS[key]
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


def normalize_key(key):
    return key.strip().lstrip("-").replace("-", "_")


def parse_lines(lines, source="<config>"):
    """[(key, raw value)] from ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        pairs.append((normalize_key(key), value.strip()))
    return pairs


def resolve(config_path=None, overrides=()):
    """RunConfig from defaults, then the file, then ``overrides`` (later wins)."""
    pairs = []
    if config_path:
        try:
            with open(config_path) as fh:
                pairs += parse_lines(fh, config_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
    pairs += list(overrides)
    values = {}
    for key, raw in pairs:
        key = normalize_key(key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def from_dict(d):
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**d)


def split_overrides(extra):
    """``['--epochs', '3', '--lr=1e-3']`` -> [('epochs', '3'), ('lr', '1e-3')]."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"option {tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        pairs.append((normalize_key(key), value))
    return pairs


def dump_json(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
