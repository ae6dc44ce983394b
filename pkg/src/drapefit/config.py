"""Run configuration: one strict JSON document covering every pipeline knob.

Each command reads only the sections it needs, but the whole resolved
document is serialized into the output directory so a run can be replayed
from its artifacts alone.  Unknown keys are rejected with their dotted
path so typos fail loudly instead of silently using a default.
"""

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MeshSection:
    radius: float = 0.15
    edge_length: float = 0.015
    density: float = 0.144
    pin_radius: float = 0.09
    path: str = ""              # when set, load this mesh instead of generating


@dataclass(frozen=True)
class SimSection:
    n_steps: int = 100
    h: float = 0.05
    k_handle: float = 1e4
    damping: float = 0.0
    gravity: tuple = (0.0, 0.0, -9.8)
    save_trajectory: bool = False


@dataclass(frozen=True)
class CameraSection:
    half_width: float = 0.18
    resolution: int = 256
    sharpness: float = 1.0


@dataclass(frozen=True)
class MaterialSection:
    path: str = ""              # material JSON; built-in default when empty
    bend_scale: float = 1.0     # quick stiffness sweeps without extra files
    stretch_scale: float = 1.0


@dataclass(frozen=True)
class PriorSection:
    stretch_mean: float = 50.0
    coupling_mean: float = 0.3
    bend_mean: float = 1e-4
    rel_std: float = 0.5


@dataclass(frozen=True)
class TrainSection:
    model_kind: str = "homogeneous"
    epochs: int = 200
    mc_samples: int = 4
    sigma_sq: float = 0.01
    data_weight: float = 1.0
    base_lr: float = 1e-2
    eta_lr: float = 1.0
    lr_decay: float = 0.995
    init_scale_fraction: float = 0.01


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    threshold: float = 0.5
    use_meshes: bool = False


@dataclass(frozen=True)
class SampleSection:
    count: int = 1000
    posterior: str = ""


@dataclass(frozen=True)
class EvalSection:
    predicted: str = ""
    observed: str = ""
    predicted_mesh: str = ""
    observed_mesh: str = ""
    threshold: float = 0.5


@dataclass(frozen=True)
class PosteriorSection:
    query: str = ""
    references: tuple = ()      # paths; labels come from the file stems


@dataclass(frozen=True)
class GradcheckSection:
    delta: float = 1e-5
    rel_tol: float = 1e-3
    abs_floor: float = 1e-10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    mesh: MeshSection = field(default_factory=MeshSection)
    sim: SimSection = field(default_factory=SimSection)
    camera: CameraSection = field(default_factory=CameraSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    prior: PriorSection = field(default_factory=PriorSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    posterior: PosteriorSection = field(default_factory=PosteriorSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)


_SCALARS = (int, float, str, bool)


def _build(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in payload:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for name, fld in known.items():
        if name not in payload:
            continue
        value = payload[name]
        where = f"{path}.{name}" if path else name
        if isinstance(fld.type, type) and is_dataclass(fld.type):
            kwargs[name] = _build(fld.type, value, where)
            continue
        if isinstance(value, (list, tuple)):
            value = tuple(value)
        elif value is not None and not isinstance(value, _SCALARS):
            raise ConfigError(f"{where}: expected a scalar or list")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(payload: dict) -> RunConfig:
    """Strictly parse a nested config dict; unknown keys name their path."""
    return _build(RunConfig, payload, "")


def to_dict(config: RunConfig) -> dict:
    return asdict(config)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(payload)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(to_dict(config), indent=1) + "\n")
