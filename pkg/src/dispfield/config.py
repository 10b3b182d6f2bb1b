"""Run configuration: one flat key-value file driving the whole tool.

Format, line by line:

    # comment (also allowed after a value)
    key = value

Values are typed by the field they set: integers, floats, booleans
(true/false), bare strings for paths and names, and comma- or
space-separated numbers for the loss weights. Unknown keys are
rejected, so a typo fails the run instead of silently using a default.

    epochs = 120
    lambdas = 5, 400, 40, 50
    cloud = data/shape.ply
    bounded_head = true

`RunConfig` is the union of everything the subcommands need: the
trainer's settings, both networks' hyperparameters, the ablation
switches, the transfer stack's shape, and I/O paths. Every field has a
default; a config file only states what it changes.
"""

import dataclasses
import json

from .errors import ConfigError, ParseError
from .model import AblationSwitches, build_model
from .training import DEFAULT_LAMBDAS, TrainConfig
from .transfer import GridSettings, TransferConfig


@dataclasses.dataclass
class RunConfig:
    # training schedule
    lambdas: tuple = DEFAULT_LAMBDAS
    epochs: int = 120
    batch_surface: int = 4096
    batch_offsurface: int = 4096
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    anneal_start_fraction: float = 0.8
    T_m: float = 0.2
    checkpoint_every: int = 0
    signed_void: bool = False

    # composed model
    omega_base: float = 15.0
    omega_disp: float = 60.0
    hidden_dim: int = 256
    depth: int = 4
    disp_hidden_dim: int = 0  # 0 inherits hidden_dim
    disp_depth: int = 0       # 0 inherits depth
    alpha: float = 0.05
    nu: float = 0.02

    # ablation switches
    bounded_head: bool = True
    attenuate: bool = True
    progressive: bool = True

    # transfer stack
    transfer_omega_base: float = 5.0
    transfer_base_hidden: int = 96
    transfer_base_depth: int = 3
    film_hidden: int = 256
    film_depth: int = 4
    feature_channels: int = 32
    encoder_hidden: int = 32
    mapping_hidden: int = 64
    grid_resolution: int = 32
    grid_dim: int = 3
    grid_axis: int = 2
    grid_points: int = 0  # training-grid cloud subset; 0 uses the whole cloud
    transfer_pretrain_radius: float = 0.0  # sphere-init transfer bases; 0 = skip
    transfer_pretrain_steps: int = 500

    # execution
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    threads: int = 1

    # paths
    cloud: str = ""
    out_dir: str = "run"
    source_cloud: str = ""
    target_cloud: str = ""
    source_base_cloud: str = ""
    target_base_cloud: str = ""

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.train_config()  # validates the training subset
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        for name in ("hidden_dim", "depth", "transfer_base_hidden",
                     "transfer_base_depth", "film_hidden", "film_depth",
                     "feature_channels", "encoder_hidden", "mapping_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.disp_hidden_dim < 0 or self.disp_depth < 0:
            raise ConfigError("disp_hidden_dim and disp_depth must be >= 0 "
                              "(0 inherits the base setting)")
        if not (self.omega_base > 0 and self.omega_disp > 0
                and self.transfer_omega_base > 0):
            raise ConfigError("frequencies must be positive")
        if not (self.alpha > 0 and self.nu > 0):
            raise ConfigError("alpha and nu must be positive")
        if not 0.0 <= self.transfer_pretrain_radius < 1.0:
            raise ConfigError("transfer_pretrain_radius must lie in [0, 1)")
        if self.transfer_pretrain_steps < 0:
            raise ConfigError("transfer_pretrain_steps must be >= 0")
        GridSettings(resolution=self.grid_resolution, dim=self.grid_dim,
                     axis=self.grid_axis)

    # ---------------------------------------------------------- projections

    def train_config(self):
        return TrainConfig(
            lambdas=self.lambdas, epochs=self.epochs,
            batch_surface=self.batch_surface,
            batch_offsurface=self.batch_offsurface,
            lr_init=self.lr_init, lr_final=self.lr_final,
            anneal_start_fraction=self.anneal_start_fraction, T_m=self.T_m,
            seed=self.seed, precision=self.precision,
            deterministic=self.deterministic, signed_void=self.signed_void,
            checkpoint_every=self.checkpoint_every)

    def switches(self):
        return AblationSwitches(bounded_head=self.bounded_head,
                                attenuate=self.attenuate,
                                progressive=self.progressive)

    def make_model(self, dtype=None):
        return build_model(
            omega_base=self.omega_base, omega_disp=self.omega_disp,
            hidden_dim=self.hidden_dim, depth=self.depth,
            disp_hidden_dim=self.disp_hidden_dim or None,
            disp_depth=self.disp_depth or None,
            alpha=self.alpha, nu=self.nu, switches=self.switches(),
            seed=self.seed, dtype=dtype)

    def transfer_config(self):
        return TransferConfig(
            omega_base=self.transfer_omega_base,
            base_hidden=self.transfer_base_hidden,
            base_depth=self.transfer_base_depth,
            omega_disp=self.omega_disp, film_hidden=self.film_hidden,
            film_depth=self.film_depth,
            feature_channels=self.feature_channels,
            encoder_hidden=self.encoder_hidden,
            mapping_hidden=self.mapping_hidden,
            grid=GridSettings(resolution=self.grid_resolution,
                              dim=self.grid_dim, axis=self.grid_axis),
            grid_points=self.grid_points,
            pretrain_radius=self.transfer_pretrain_radius,
            pretrain_steps=self.transfer_pretrain_steps,
            alpha=self.alpha, nu=self.nu, seed=self.seed)

    # ------------------------------------------------------------------- io

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, values, path=None):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kwargs[key] = _coerce(key, raw, fields[key].type, path)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc}", path=str(path))
        return cls.from_dict(parse_config_text(text, path=path), path=path)

    def to_text(self):
        """The full configuration in the file format, defaults included.
        Unset paths appear as comments since an empty value cannot be
        written in the format."""
        lines = ["# dispfield run configuration; key = value, '#' comments"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(_render_number(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = _render_number(v)
            elif v == "":
                lines.append(f"# {f.name} =")
                continue
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs, path=None):
        """New config with `key=value` strings applied on top."""
        values = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, _, raw = pair.partition("=")
            values[key.strip()] = raw.strip()
        merged = {f.name: getattr(self, f.name)
                  for f in dataclasses.fields(self)}
        fields = {f.name: f for f in dataclasses.fields(self)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, raw in values.items():
            merged[key] = _coerce(key, raw, fields[key].type, path)
        return type(self)(**merged)


def _render_number(v):
    return json.dumps(v) if isinstance(v, float) else str(v)


def parse_config_text(text, path=None):
    """Key-value lines -> {key: raw string}. Duplicate keys are errors."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value', "
                             f"got {line!r}", path=str(path) if path else None)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ParseError(f"line {lineno}: empty key or value",
                             path=str(path) if path else None)
        if key in values:
            raise ParseError(f"line {lineno}: duplicate key {key!r}",
                             path=str(path) if path else None)
        values[key] = value
    return values


def _coerce(key, raw, annotation, path=None):
    if not isinstance(raw, str):
        return raw
    kind = annotation if isinstance(annotation, str) else getattr(
        annotation, "__name__", str(annotation))
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}")
