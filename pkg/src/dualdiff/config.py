"""Training configuration and its flat ``key = value`` file format."""
import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .network import NetConfig

NOISE_CHOICES = ("gaussian", "bernoulli", "both")
CONDITIONER_CHOICES = ("plain", "mfcm")
LOSS_CHOICES = ("base", "kl", "full")
SAMPLER_CHOICES = ("ddim", "ddpm")
MODEL_CHOICES = ("toy", "oracle")
LR_SCHEDULE_CHOICES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainingConfig:
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    lambda4: float = 0.01
    lambda5: float = 0.1
    # diffusion
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # optimisation
    train_steps: int = 200000
    batch_size: int = 8
    learning_rate: float = 5e-5
    lr_schedule: str = "constant"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hflip: bool = False
    # ablation axes
    noise: str = "both"
    conditioner: str = "mfcm"
    loss: str = "full"
    # sampling
    sampler: str = "ddim"
    stride: int = 50
    ensemble: int = 1
    # toy network
    model: str = "toy"
    base_channels: int = 12
    cond_channels: tuple = (8, 12, 16)
    time_dim: int = 32
    mfcm_stages: int = 2
    attention: bool = True
    cross_attention: bool = False
    # bookkeeping
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        checks = [
            ("noise", NOISE_CHOICES), ("conditioner", CONDITIONER_CHOICES),
            ("loss", LOSS_CHOICES), ("sampler", SAMPLER_CHOICES), ("model", MODEL_CHOICES),
            ("lr_schedule", LR_SCHEDULE_CHOICES),
        ]
        for key, allowed in checks:
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("loss weights must be non-negative")
        for key in ("T", "batch_size", "stride", "ensemble", "time_dim", "base_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be >= 0")
        if self.sampler == "ddpm" and self.stride != 1:
            raise ConfigError("ancestral ddpm sampling runs every step; set stride = 1")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def effective_lambdas(self):
        """Weights after applying the loss-term ablation flag."""
        l1, l2, l3, l4, l5 = self.lambdas
        if self.loss == "base":
            return (l1, l2, 0.0, 0.0, 0.0)
        if self.loss == "kl":
            return (l1, l2, l3, l4, 0.0)
        return (l1, l2, l3, l4, l5)

    @property
    def branches(self):
        return ("gaussian", "bernoulli") if self.noise == "both" else (self.noise,)

    def net_config(self):
        return NetConfig(
            base_channels=self.base_channels,
            cond_channels=tuple(self.cond_channels),
            time_dim=self.time_dim,
            mfcm_stages=self.mfcm_stages,
            fusion=self.conditioner == "mfcm",
            attention=self.attention,
            cross_attention=self.cross_attention,
            T=self.T,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(TrainingConfig)}


def _parse_value(key, text):
    default = getattr(TrainingConfig, key)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text


def parse_config(text, base=None):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    base = base or TrainingConfig()
    return base.replace(**values)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(cfg):
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
