"""Turn an :class:`ExperimentConfig` into datasets, a subnet and a training run."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks, data, nn
from ._seeding import derive_seed
from .config import ExperimentConfig
from .federation import EvalSets, FederationConfig, TrainingResult, run_training


@dataclass
class Setup:
    spec: nn.NetworkSpec
    shards: list
    test: data.LabeledDataset
    public: data.PublicDataset
    trigger: data.TriggerSpec
    public_pool: data.LabeledDataset | None = None


def network_spec(cfg: ExperimentConfig) -> nn.NetworkSpec:
    m = cfg.model
    return nn.small_cnn(tuple(cfg.dataset.shape), cfg.dataset.classes, m.conv_channels,
                        m.hidden, m.kernel_size, m.pool)


def trigger_spec(cfg: ExperimentConfig) -> data.TriggerSpec:
    t = cfg.trigger
    return data.TriggerSpec.make(t.kind, tuple(cfg.dataset.shape), t.size,
                                 None if t.position is None else tuple(t.position), t.target_label)


def load_pool(cfg: ExperimentConfig) -> data.LabeledDataset:
    ds = cfg.dataset
    total = ds.train_size + ds.test_size + ds.public_pool_size
    if ds.kind == "synth":
        per_class = -(-total // ds.classes)
        return data.synth_dataset(ds.classes, per_class, tuple(ds.shape),
                                  derive_seed(cfg.seed, "data"), ds.noise, ds.pattern_seed)
    pool = data.load_dataset(ds.path, ds.kind)
    images = data.fit_to_shape(pool.images, tuple(ds.shape))
    return data.LabeledDataset(images, pool.labels, pool.ids, ds.classes)


def build_setup(cfg: ExperimentConfig) -> Setup:
    ds, part = cfg.dataset, cfg.partition
    pool = load_pool(cfg)
    train, test, public_pool = data.split_dataset(
        pool, [ds.train_size, ds.test_size, ds.public_pool_size], derive_seed(cfg.seed, "split"))
    pseed = derive_seed(cfg.seed, "partition")
    if part.kind == "iid":
        shards = data.partition_iid(train, part.clients, pseed)
    else:
        shards = data.partition_shards(train, part.clients, part.shards_per_client, pseed)
    atk = cfg.attack
    if atk.public_source == "noise":
        public = data.noise_public_dataset(atk.public_size, tuple(ds.shape),
                                           derive_seed(cfg.seed, "public"))
    else:
        public = data.make_public_dataset(public_pool, atk.public_size,
                                          derive_seed(cfg.seed, "public"), tuple(ds.shape))
    return Setup(network_spec(cfg), shards, test, public, trigger_spec(cfg), public_pool)


def subnet_spec(cfg: ExperimentConfig, spec: nn.NetworkSpec) -> attacks.SubnetSpec:
    atk = cfg.attack
    return attacks.SubnetSpec.build(spec, atk.subnet_width, atk.subnet_slots,
                                    derive_seed(cfg.seed, "slots"))


def subnet_train_config(cfg: ExperimentConfig) -> attacks.SubnetTrainConfig:
    atk = cfg.attack
    return attacks.SubnetTrainConfig(atk.activation_target, atk.lam, atk.subnet_epochs,
                                     atk.subnet_batch_size, atk.subnet_learning_rate,
                                     atk.trigger_fraction, seed=derive_seed(cfg.seed, "subnet"))


def train_subnet(cfg: ExperimentConfig, setup: Setup):
    sspec = subnet_spec(cfg, setup.spec)
    params, stats = attacks.train_backdoor_subnet(setup.public, setup.trigger, sspec,
                                                  subnet_train_config(cfg))
    return sspec, params, stats


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(cfg.partition.clients, f.clients_per_round, f.rounds, f.eps,
                            nn.TrainConfig(f.learning_rate, f.batch_size, f.local_epochs),
                            derive_seed(cfg.seed, "federation"), f.workers, f.lr_decay)


def attack_plan(cfg: ExperimentConfig, setup: Setup, subnet=None) -> attacks.AttackPlan:
    atk = cfg.attack
    if atk.role == "none":
        return attacks.AttackPlan()
    sspec = params = None
    if atk.role != "client_data_poison":
        sspec, params, _ = subnet if subnet is not None else train_subnet(cfg, setup)
    return attacks.AttackPlan(
        role=atk.role, period=atk.period,
        malicious_client_ids=atk.malicious_ids if atk.role.startswith("client_") else (),
        poison_fraction=atk.poison_fraction, trigger=setup.trigger, subnet=params,
        subnet_spec=sspec, subnet_cfg=subnet_train_config(cfg), public=setup.public,
        beta=atk.beta, margin=atk.margin, retrain_subnet=atk.retrain_subnet,
        always_participate=atk.always_participate)


@dataclass
class RunOutput:
    result: TrainingResult
    setup: Setup
    subnet: tuple | None = None
    reference_curve: list | None = None

    def summary(self) -> dict:
        out = self.result.summary()
        if self.subnet is not None:
            stats = self.subnet[2]
            out["subnet_clean_activation"] = stats.clean_activation
            out["subnet_triggered_activation"] = stats.triggered_activation
        return out


def run(cfg: ExperimentConfig, on_round=None, setup: Setup | None = None) -> RunOutput:
    """Full experiment: data, optional subnet training, FedAvg with the attack."""
    setup = setup or build_setup(cfg)
    fcfg = federation_config(cfg)
    eval_sets = EvalSets(setup.test, setup.trigger)
    subnet = None
    if cfg.attack.role in ("server_dabs", "server_one_shot", "client_sra"):
        subnet = train_subnet(cfg, setup)
    plan = attack_plan(cfg, setup, subnet)
    reference = None
    if cfg.attack.cad_reference == "clean_run" and plan.role != "none":
        clean = run_training(fcfg, setup.spec, setup.shards, eval_sets, None)
        reference = [log.clean_accuracy for log in clean.logs]
    result = run_training(fcfg, setup.spec, setup.shards, eval_sets, plan,
                          reference_curve=reference, on_round=on_round)
    return RunOutput(result, setup, subnet, reference)


def asr_std(logs, start: int) -> float:
    """Population std of per-round ASR over rounds ``t >= start``."""
    values = [log.asr for log in logs if log.t >= start]
    return float(np.std(values)) if values else 0.0
