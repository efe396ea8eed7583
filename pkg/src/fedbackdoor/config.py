"""Experiment configuration: YAML sections mapped onto strict dataclasses.

Unknown keys, wrong types and cross-field inconsistencies raise
:class:`ConfigError` naming the offending ``section.key``.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetSection:
    kind: str = "synth"
    path: str | None = None
    shape: list = field(default_factory=lambda: [1, 16, 16])
    classes: int = 10
    noise: float = 0.6
    pattern_seed: int = 0
    train_size: int = 4000
    test_size: int = 1000
    public_pool_size: int = 1000


@dataclass
class ModelSection:
    conv_channels: int = 32
    hidden: int = 128
    kernel_size: int = 3
    pool: int = 2


@dataclass
class PartitionSection:
    kind: str = "iid"
    clients: int = 20
    shards_per_client: int = 2


@dataclass
class FederationSection:
    clients_per_round: int = 5
    rounds: int = 80
    eps: float = 0.04
    learning_rate: float = 0.01
    lr_decay: float = 1.0
    batch_size: int = 32
    local_epochs: int = 5
    workers: int = 1


@dataclass
class TriggerSection:
    kind: str = "white_patch"
    size: int = 3
    position: list | None = None
    target_label: int = 0


@dataclass
class AttackSection:
    role: str = "none"
    period: int = 10
    malicious_clients: typing.Union[int, list] = field(default_factory=lambda: [0])
    always_participate: bool = True
    poison_fraction: float = 0.5
    public_source: str = "heldout"
    public_size: int = 1000
    subnet_width: int = 1
    subnet_slots: typing.Union[str, list] = "last"
    activation_target: float = 10.0
    lam: float = 0.5
    subnet_epochs: int = 100
    subnet_batch_size: int = 32
    subnet_learning_rate: float = 0.01
    trigger_fraction: float = 0.3
    margin: float = 5.0
    beta: float | None = None
    retrain_subnet: bool = False
    cad_reference: str = "snapshot"

    @property
    def malicious_ids(self) -> tuple:
        if isinstance(self.malicious_clients, int):
            return tuple(range(self.malicious_clients))
        return tuple(self.malicious_clients)


@dataclass
class OutputSection:
    dir: str = "runs/experiment"
    checkpoints: bool = True


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "partition": PartitionSection,
    "federation": FederationSection,
    "trigger": TriggerSection,
    "attack": AttackSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    federation: FederationSection = field(default_factory=FederationSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    attack: AttackSection = field(default_factory=AttackSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace_field(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one ``section.key`` (or ``seed``) replaced, re-validated."""
        d = self.to_dict()
        parts = dotted.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(dotted, "no such config field")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(dotted, "no such config field")
        node[parts[-1]] = value
        return from_dict(d)


def _check_type(path, value, annotation):
    if isinstance(annotation, str):
        annotation = eval(annotation, {"typing": typing, "list": list})  # noqa: S307
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        for arm in typing.get_args(annotation):
            try:
                return _check_type(path, value, arm)
            except ConfigError:
                continue
        raise ConfigError(path, f"value {value!r} does not match {annotation}")
    if annotation is type(None):
        if value is not None:
            raise ConfigError(path, "expected null")
        return None
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if annotation is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def _build_section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "section must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {key: _check_type(f"{name}.{key}", value, hints[key]) for key, value in raw.items()}
    return cls(**kwargs)


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in d:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    seed = _check_type("seed", d.get("seed", 0), int)
    sections = {name: _build_section(name, cls, d.get(name)) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=seed, **sections)
    validate(cfg)
    return cfg


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: ExperimentConfig):
    ds, part, fed, trig, atk = cfg.dataset, cfg.partition, cfg.federation, cfg.trigger, cfg.attack
    _require(ds.kind in ("synth", "cifar10", "tensors"), "dataset.kind",
             "must be synth, cifar10 or tensors")
    _require(ds.kind == "synth" or ds.path, "dataset.path", f"required for kind {ds.kind}")
    _require(len(ds.shape) == 3 and all(isinstance(x, int) and x > 0 for x in ds.shape),
             "dataset.shape", "must be three positive integers [C, H, W]")
    _require(ds.classes >= 2, "dataset.classes", "must be >= 2")
    _require(ds.noise >= 0, "dataset.noise", "must be >= 0")
    for key in ("train_size", "test_size", "public_pool_size"):
        _require(getattr(ds, key) >= 1, f"dataset.{key}", "must be >= 1")
    m = cfg.model
    for key in ("conv_channels", "hidden", "kernel_size", "pool"):
        _require(getattr(m, key) >= 1, f"model.{key}", "must be >= 1")
    _require(part.kind in ("iid", "shards"), "partition.kind", "must be iid or shards")
    _require(part.clients >= 1, "partition.clients", "must be >= 1")
    _require(part.shards_per_client >= 1, "partition.shards_per_client", "must be >= 1")
    _require(part.clients <= ds.train_size, "partition.clients", "more clients than samples")
    _require(1 <= fed.clients_per_round <= part.clients, "federation.clients_per_round",
             "must lie in [1, partition.clients]")
    _require(fed.rounds >= 0, "federation.rounds", "must be >= 0")
    _require(fed.eps > 0, "federation.eps", "must be > 0")
    _require(fed.learning_rate > 0, "federation.learning_rate", "must be > 0")
    _require(0 < fed.lr_decay <= 1, "federation.lr_decay", "must lie in (0, 1]")
    _require(fed.batch_size >= 1, "federation.batch_size", "must be >= 1")
    _require(fed.local_epochs >= 0, "federation.local_epochs", "must be >= 0")
    _require(fed.workers >= 1, "federation.workers", "must be >= 1")
    _require(trig.kind in ("white_patch", "logo_patch"), "trigger.kind",
             "must be white_patch or logo_patch")
    _require(1 <= trig.size <= min(ds.shape[1:]), "trigger.size", "must fit inside the image")
    _require(0 <= trig.target_label < ds.classes, "trigger.target_label",
             "must be a valid class index")
    if trig.position is not None:
        _require(len(trig.position) == 2 and all(isinstance(p, int) for p in trig.position),
                 "trigger.position", "must be [row, col] or null")
        r, c = trig.position
        _require(0 <= r <= ds.shape[1] - trig.size and 0 <= c <= ds.shape[2] - trig.size,
                 "trigger.position", "patch does not fit inside the image")
    roles = ("none", "server_dabs", "server_one_shot", "client_data_poison", "client_sra")
    _require(atk.role in roles, "attack.role", f"must be one of {', '.join(roles)}")
    _require(atk.period >= 1, "attack.period", "must be >= 1")
    if atk.role.startswith("client_"):
        ids = atk.malicious_ids
        _require(len(ids) >= 1, "attack.malicious_clients", f"role {atk.role} needs attackers")
        _require(all(isinstance(i, int) and 0 <= i < part.clients for i in ids),
                 "attack.malicious_clients", f"ids must lie in [0, {part.clients})")
        _require(len(set(ids)) == len(ids), "attack.malicious_clients", "ids must be distinct")
    _require(0 <= atk.poison_fraction <= 1, "attack.poison_fraction", "must lie in [0, 1]")
    _require(atk.public_source in ("heldout", "noise"), "attack.public_source",
             "must be heldout or noise")
    _require(1 <= atk.public_size, "attack.public_size", "must be >= 1")
    _require(atk.public_source == "noise" or atk.public_size <= ds.public_pool_size,
             "attack.public_size", "exceeds dataset.public_pool_size")
    _require(atk.subnet_width >= 1, "attack.subnet_width", "must be >= 1")
    _require(isinstance(atk.subnet_slots, list) or atk.subnet_slots in ("last", "random"),
             "attack.subnet_slots", "must be last, random or per-layer index lists")
    _require(atk.activation_target > 0, "attack.activation_target", "must be > 0")
    _require(atk.lam > 0, "attack.lam", "must be > 0")
    _require(atk.subnet_epochs >= 1, "attack.subnet_epochs", "must be >= 1")
    _require(atk.subnet_batch_size >= 1, "attack.subnet_batch_size", "must be >= 1")
    _require(atk.subnet_learning_rate > 0, "attack.subnet_learning_rate", "must be > 0")
    _require(0 < atk.trigger_fraction < 1, "attack.trigger_fraction", "must lie in (0, 1)")
    _require(atk.margin >= 0, "attack.margin", "must be >= 0")
    _require(atk.beta is None or atk.beta >= 0, "attack.beta", "must be >= 0 or null")
    _require(atk.cad_reference in ("snapshot", "clean_run"), "attack.cad_reference",
             "must be snapshot or clean_run")


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<yaml>", str(exc)) from exc
    return from_dict(data or {})


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    return loads(text)


BUNDLED_DIR = Path(__file__).parent / "configs"


def bundled(name: str) -> Path:
    """Path of a bundled config, e.g. ``bundled("dabs_iid")``."""
    path = BUNDLED_DIR / f"{name}.yaml"
    if not path.exists():
        raise ConfigError("<file>", f"no bundled config named {name!r}")
    return path


def bundled_names() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))
