"""INI experiment configs: typed sections, defaults and kind-specific checks."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

KINDS = (
    "ode_vs_sim",
    "sequential_plateaus",
    "tied_vs_untied",
    "relu_bias",
    "longtime_reduced",
    "truncated_vs_vanilla",
    "gaussian_equivalence",
    "online_pca_bench",
    "scaling_robustness",
)

# kinds that integrate the order-parameter equations
ODE_KINDS = ("ode_vs_sim", "sequential_plateaus")


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending section.key."""


@dataclass
class ExperimentSection:
    kind: str = ""
    seed: int = 0


@dataclass
class DataSection:
    dim: int = 1000
    rho_tilde: tuple = ()
    sigma: float = 1.0
    basis: str = "gaussian"
    latent_law: str = "gaussian"
    dataset: str = ""
    dataset_format: str = ""
    num_outliers: int = 0


@dataclass
class NetworkSection:
    K: int = 3
    activation: str = "erf"
    tied: bool = False
    bias: bool = False
    std: float = 1.0
    decoder_std: typing.Optional[float] = None
    scaled_fields: bool = True


@dataclass
class TrainSection:
    eta: float = 1.0
    kappa: float = 0.0
    rescale_lr: bool = True
    lr_schedule: str = "constant"
    lr_decay_steps: float = 1.0e4
    s_max: float = 100.0
    truncated: bool = False
    n_eval: int = 0
    log_factor: float = 1.2


@dataclass
class OdeSection:
    ds: float = 0.01
    s_max: typing.Optional[float] = None
    init_dim: int = 1000


@dataclass
class CompareSection:
    tolerance: float = 0.05
    s_min: float = 1.0


@dataclass
class ReducedSection:
    alpha_w: tuple = (1.0,)
    alpha_v: tuple = (1.0,)
    s_max: float = 1.0e7
    points_per_decade: int = 10
    fit_decades: float = 2.0
    sqrt_decoder: bool = False


@dataclass
class PcaSection:
    rule: str = "sanger"
    eta0: float = 0.02
    schedule: str = "inverse_time"
    t0: float = 2000.0
    kappa: float = 0.0
    steps: int = 100_000
    seeds: int = 5
    std: float = 0.1
    target_overlap: float = 0.98


@dataclass
class OutputSection:
    directory: str = "out"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    ode: OdeSection = field(default_factory=OdeSection)
    compare: CompareSection = field(default_factory=CompareSection)
    reduced: ReducedSection = field(default_factory=ReducedSection)
    pca: PcaSection = field(default_factory=PcaSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def kind(self) -> str:
        return self.experiment.kind

    @property
    def seed(self) -> int:
        return self.experiment.seed


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, typ, where: str):
    optional = typing.get_origin(typ) is typing.Union
    if optional:
        if raw.strip().lower() in ("", "none"):
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(float(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        name = {bool: "a boolean", int: "an integer", float: "a number", tuple: "a list of numbers"}[typ]
        raise ConfigError(f"{where}: expected {name}, got {raw!r}") from None


def _section_types(cls) -> dict[str, tuple[str, object]]:
    hints = typing.get_type_hints(cls)
    return {f.name.lower(): (f.name, hints[f.name]) for f in dataclasses.fields(cls)}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"[{name}]: unknown section (valid: {', '.join(sections)})")
        target = getattr(cfg, name)
        types = _section_types(type(target))
        for key, raw in parser.items(name):
            if key not in types:
                valid = ", ".join(n for n, _ in types.values())
                raise ConfigError(f"{name}.{key}: unknown key (valid: {valid})")
            attr, typ = types[key]
            setattr(target, attr, _convert(raw, typ, f"{name}.{attr}"))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check field ranges and the fields each kind needs; returns ``cfg``."""
    kind = cfg.kind
    _require(bool(kind), "experiment.kind", f"missing (valid kinds: {', '.join(KINDS)})")
    _require(kind in KINDS, "experiment.kind", f"unknown kind {kind!r} (valid kinds: {', '.join(KINDS)})")
    _require(cfg.seed >= 0, "experiment.seed", "must be nonnegative")

    d, n, t = cfg.data, cfg.network, cfg.train
    needs_data = kind != "longtime_reduced"
    if d.dataset:
        _require(kind not in ODE_KINDS or d.num_outliers > 0, "data.num_outliers", "required with a dataset")
    else:
        _require(len(d.rho_tilde) > 0, "data.rho_tilde", f"required for kind {kind}")
        _require(all(r > 0 for r in d.rho_tilde), "data.rho_tilde", "entries must be positive")
        _require(
            all(a >= b for a, b in zip(d.rho_tilde, d.rho_tilde[1:])), "data.rho_tilde", "must be sorted descending"
        )
        _require(d.sigma >= 0, "data.sigma", "must be nonnegative")
        if needs_data:
            _require(d.dim >= 2, "data.dim", "must be at least 2")
    _require(d.basis in ("gaussian", "sinusoidal"), "data.basis", "must be gaussian or sinusoidal")
    _require(d.latent_law in ("gaussian", "laplace", "rademacher"), "data.latent_law", "must be gaussian, laplace or rademacher")

    _require(n.K >= 1, "network.K", "must be positive")
    _require(n.activation in ("linear", "erf", "relu"), "network.activation", "must be linear, erf or relu")
    _require(n.std > 0, "network.std", "must be positive")
    _require(t.eta > 0, "train.eta", "must be positive")
    _require(t.kappa >= 0, "train.kappa", "must be nonnegative")
    _require(t.s_max > 0, "train.s_max", "must be positive")
    _require(t.log_factor > 1, "train.log_factor", "must exceed 1")
    _require(t.n_eval == 0 or t.n_eval >= 2, "train.n_eval", "must be 0 (exact) or at least 2")
    _require(t.lr_schedule in ("constant", "inverse_time"), "train.lr_schedule", "must be constant or inverse_time")
    _require(cfg.ode.ds > 0, "ode.ds", "must be positive")
    _require(cfg.compare.tolerance > 0, "compare.tolerance", "must be positive")

    if kind in ODE_KINDS:
        _require(not n.tied, "network.tied", f"kind {kind} integrates untied networks only")
        _require(not n.bias, "network.bias", f"kind {kind} has no bias in its order parameters")
        _require(not t.truncated, "train.truncated", f"kind {kind} runs vanilla SGD")
        _require(t.rescale_lr and n.scaled_fields, "train.rescale_lr", f"kind {kind} needs the rescaled limit")
        _require(cfg.ode.init_dim >= 100, "ode.init_dim", "must be at least 100")
    if kind == "relu_bias":
        _require(n.activation == "relu", "network.activation", "relu_bias needs relu")
    if kind == "truncated_vs_vanilla":
        _require(not n.tied, "network.tied", "truncated SGD needs an untied decoder")
    if kind == "longtime_reduced":
        r = cfg.reduced
        _require(n.activation in ("erf", "linear"), "network.activation", "aligned-manifold flow covers erf and linear")
        _require(len(r.alpha_w) == len(d.rho_tilde), "reduced.alpha_w", "needs one entry per spike")
        _require(len(r.alpha_v) == len(d.rho_tilde), "reduced.alpha_v", "needs one entry per spike")
        _require(r.s_max > 1, "reduced.s_max", "must exceed 1")
        _require(r.fit_decades >= 2, "reduced.fit_decades", "must be at least 2")
        _require(r.s_max >= 10**r.fit_decades, "reduced.s_max", "shorter than the fit window")
        _require(r.points_per_decade >= 3, "reduced.points_per_decade", "must be at least 3")
    if kind == "online_pca_bench":
        p = cfg.pca
        _require(p.rule in ("hebbian", "hebbian_decay", "oja", "sanger"), "pca.rule", "must be hebbian, hebbian_decay, oja or sanger")
        _require(p.rule == "sanger" or n.K == 1, "network.K", f"rule {p.rule} learns a single vector")
        _require(p.schedule in ("constant", "inverse_time"), "pca.schedule", "must be constant or inverse_time")
        _require(p.eta0 > 0, "pca.eta0", "must be positive")
        _require(p.t0 > 0, "pca.t0", "must be positive")
        _require(p.steps >= 1, "pca.steps", "must be positive")
        _require(p.seeds >= 1, "pca.seeds", "must be positive")
        _require(p.std > 0, "pca.std", "must be positive")
    if kind in ("truncated_vs_vanilla", "online_pca_bench") and not d.dataset:
        _require(n.K <= len(d.rho_tilde), "network.K", "per-vector recovery needs K <= number of spikes")
    return cfg


def degenerate_spikes(cfg: ExperimentConfig) -> bool:
    """True when per-eigenvector recovery is ill-posed because two spikes are equal."""
    rho = cfg.data.rho_tilde
    return any(a == b for a, b in zip(rho, rho[1:]))


def example_configs() -> dict[str, Path]:
    """Shipped example config for every kind."""
    root = Path(__file__).with_name("configs")
    return {k: root / f"{k}.ini" for k in KINDS if (root / f"{k}.ini").exists()}
