"""key=value run configuration shared by the trainer and the command line."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import GAN_VARIANTS, LossWeights
from .training import DepthOptions, OptimizerConfig, SemanticOptions


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    eval_data: str = ""
    seed: int = 0
    steps: int = 300
    batch_size: int = 4
    # architecture
    base_width: int = 16
    use_mssp: bool = True
    mssp_kernels: str = "1,4,9"
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_constant: int = 100
    epochs_decay: int = 100
    # loss weights
    cyc_semantic: float = 10.0
    rec_semantic: float = 2.0
    cyc_depth: float = 10.0
    rec_depth: float = 1.0
    depth: float = 0.5
    smooth: float = 0.5
    # ablation switches
    use_rec: bool = True
    use_semantic_input: bool = True
    use_depth_loss: bool = True
    use_smoothness: bool = True
    smoothness_guide: str = "semantic"
    gan_variant: str = "log"
    joint_backprop: bool = False
    # bookkeeping
    buffer_size: int = 50
    checkpoint_every: int = 100
    grid_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.smoothness_guide not in ("semantic", "rgb"):
            raise ConfigError("smoothness_guide must be 'semantic' or 'rgb'")
        if self.gan_variant not in GAN_VARIANTS:
            raise ConfigError(f"gan_variant must be one of {GAN_VARIANTS}")
        for name in ("checkpoint_every", "grid_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        self.kernels()
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def kernels(self) -> tuple:
        try:
            ks = tuple(int(k) for k in self.mssp_kernels.split(","))
        except ValueError:
            raise ConfigError(f"mssp_kernels must be comma-separated ints, "
                              f"got {self.mssp_kernels!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("mssp_kernels must be positive")
        return tuple((k, k) for k in ks)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.cyc_semantic, self.rec_semantic, self.cyc_depth,
                           self.rec_depth, self.depth, self.smooth)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.beta1, self.beta2, self.eps,
                               self.epochs_constant, self.epochs_decay, self.batch_size)

    def semantic_options(self) -> SemanticOptions:
        return SemanticOptions(self.use_mssp, self.use_rec, self.gan_variant, self.kernels())

    def depth_options(self) -> DepthOptions:
        return DepthOptions(self.use_semantic_input, self.use_depth_loss, self.use_smoothness,
                            self.smoothness_guide, self.gan_variant, self.joint_backprop)

    # -- text form -------------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: dict) -> "RunConfig":
        return replace(self, **coerce(pairs))

    def resolved(self, base: Path) -> "RunConfig":
        """Make data paths absolute, relative to ``base``."""
        out = {}
        for name in ("data", "eval_data"):
            v = getattr(self, name)
            if v:
                out[name] = str((base / v).resolve())
        return replace(self, **out)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE, _FALSE = {"true", "1", "yes", "on"}, {"false", "0", "no", "off"}


def coerce(pairs: dict) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _TYPES[key]
        if not isinstance(raw, str):
            out[key] = raw
            continue
        try:
            if kind == "bool":
                low = raw.lower()
                if low not in _TRUE | _FALSE:
                    raise ValueError(f"expected true/false, got {raw!r}")
                out[key] = low in _TRUE
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
    return out


def parse_pairs(text: str, origin: str = "<config>") -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def loads(text: str, origin: str = "<config>") -> RunConfig:
    try:
        return RunConfig(**coerce(parse_pairs(text, origin)))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(), str(path)).resolved(path.parent)
