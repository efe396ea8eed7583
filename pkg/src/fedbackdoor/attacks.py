"""Backdoor subnet training, subnet grafting and attacker behaviours.

The subnet mirrors the host's layer sequence up to (not including) the final
classifier, narrowed to ``width`` channels/units per layer and ending in one
scalar unit.  Grafting writes it into designated host slots, cuts every
connection between those slots and the rest of the network, and wires the
scalar unit into the target logit with weight ``beta``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from ._seeding import derive_seed
from .data import PublicDataset, TriggerSpec, apply_trigger, poison_dataset
from .nn import NetworkSpec, ParamSet, ShapeMismatchError

ROLES = ("none", "server_dabs", "server_one_shot", "client_data_poison", "client_sra")
SERVER_ROLES = ("server_dabs", "server_one_shot")
CLIENT_ROLES = ("client_data_poison", "client_sra")


class SubnetDivergenceError(ArithmeticError):
    pass


def narrow_network(host: NetworkSpec, width: int = 1) -> NetworkSpec:
    """Subnet architecture: host layers before the classifier, ``width`` wide,
    with a single output unit on the last parametric layer."""
    if width < 1:
        raise ValueError("width must be >= 1")
    pidx = host.parametric_indices
    if len(pidx) < 2:
        raise ShapeMismatchError("host needs a hidden parametric layer to carry a subnet")
    cut, last = pidx[-1], pidx[-2]
    if host.layers[cut].kind != "dense":
        raise ShapeMismatchError("host classifier must be a dense layer", cut)
    layers, shape, seen_param = [], host.input_shape, False
    for i, layer in enumerate(host.layers[:cut]):
        out = 1 if i == last else width
        if layer.kind == "conv2d":
            cin = layer.in_channels if not seen_param else shape[0]
            layer = nn.conv2d(cin, out, layer.kernel_size, layer.stride)
            seen_param = True
        elif layer.kind == "dense":
            layer = nn.dense(int(np.prod(shape)), out)
            seen_param = True
        layers.append(layer)
        shape = nn._layer_output_shape(layer, shape, i)
    if shape != (1,):
        raise ShapeMismatchError(
            f"layers after the last hidden layer must keep one unit, got {shape}", last)
    return NetworkSpec(host.input_shape, tuple(layers), 1)


@dataclass(frozen=True)
class SubnetSpec:
    """Where a ``width``-wide subnet sits inside ``host``.

    ``host_channel_indices[j]`` lists the host output channels/units taken
    by the j-th hidden parametric layer (every host parametric layer except
    the classifier).
    """

    host: NetworkSpec
    host_channel_indices: tuple
    width: int = 1
    network: NetworkSpec = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "network", narrow_network(self.host, self.width))
        idx = tuple(tuple(int(c) for c in row) for row in self.host_channel_indices)
        hidden = self.host.parametric_indices[:-1]
        if len(idx) != len(hidden):
            raise ShapeMismatchError(
                f"need channel indices for {len(hidden)} hidden layers, got {len(idx)}")
        for j, (li, row) in enumerate(zip(hidden, idx)):
            expected = 1 if j == len(hidden) - 1 else self.width
            bound = _out_size(self.host.layers[li])
            if len(row) != expected:
                raise ShapeMismatchError(f"expected {expected} subnet slots, got {len(row)}", li)
            if len(set(row)) != len(row):
                raise ShapeMismatchError(f"subnet slots collide: {row}", li)
            if any(c < 0 or c >= bound for c in row):
                raise ShapeMismatchError(f"subnet slots {row} outside [0, {bound})", li)
        object.__setattr__(self, "host_channel_indices", idx)

    @classmethod
    def build(cls, host: NetworkSpec, width: int = 1, select="last", seed: int = 0):
        """``select`` is "last" (highest indices), "random" (seeded) or an
        explicit per-layer list."""
        hidden = host.parametric_indices[:-1]
        if not isinstance(select, str):
            return cls(host, tuple(tuple(r) for r in select), width)
        rows = []
        for j, li in enumerate(hidden):
            k = 1 if j == len(hidden) - 1 else width
            size = _out_size(host.layers[li])
            if select == "last":
                rows.append(tuple(range(size - k, size)))
            elif select == "random":
                rng = np.random.default_rng(derive_seed(seed, "subnet-slots", li))
                rows.append(tuple(sorted(int(c) for c in rng.choice(size, k, replace=False))))
            else:
                raise ValueError(f"unknown slot selection {select!r}")
        return cls(host, tuple(rows), width)


def _out_size(layer) -> int:
    return layer.out_channels if layer.kind == "conv2d" else layer.out_dim


@dataclass(frozen=True)
class SubnetTrainConfig:
    activation_target: float = 10.0
    lam: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    trigger_fraction: float = 0.5
    bias_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.activation_target > 0:
            raise ValueError("activation_target must be > 0")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if not 0.0 < self.trigger_fraction < 1.0:
            raise ValueError("trigger_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SubnetStats:
    clean_activation: float
    triggered_activation: float
    clean_error: float
    triggered_error: float


def init_subnet(net: NetworkSpec, seed: int, bias_init: float) -> ParamSet:
    """Host-style uniform weights; biases start at ``bias_init`` so every
    ReLU in the one-unit-wide chain is live at step 0."""
    params = nn.init_params(net, seed)
    return params.with_entries({(i, "bias"): np.full(a.shape, bias_init, a.dtype)
                                for i, r, a in params if r == "bias"})


def subnet_activation(sspec: SubnetSpec, params: ParamSet, images, batch_size=500) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([nn.forward(sspec.network, params, images[s:s + batch_size])[:, 0]
                           for s in range(0, len(images), batch_size)])


def measure_subnet(sspec, params, public: PublicDataset, trig: TriggerSpec, a: float) -> SubnetStats:
    clean = subnet_activation(sspec, params, public.images).astype(np.float64)
    trig_act = subnet_activation(sspec, params, apply_trigger(public.images, trig)).astype(np.float64)
    return SubnetStats(float(clean.mean()), float(trig_act.mean()),
                       float(np.mean(clean ** 2)), float(np.mean((trig_act - a) ** 2)))


def train_backdoor_subnet(public: PublicDataset, trig: TriggerSpec, sspec: SubnetSpec,
                          cfg: SubnetTrainConfig) -> tuple[ParamSet, SubnetStats]:
    """Fit the subnet so clean inputs give ~0 and triggered inputs give ~a.

    Each mini-batch triggers ``trigger_fraction`` of its samples; their squared
    error toward ``a`` is weighted by ``lam``, the rest are pulled toward 0.
    Only the unlabeled public images are used.
    """
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    net = sspec.network
    params = init_subnet(net, derive_seed(cfg.seed, "subnet-init"), cfg.bias_init)
    rng = np.random.default_rng(derive_seed(cfg.seed, "subnet-train"))
    images = public.images
    n = len(images)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            k = int(math.floor(cfg.trigger_fraction * len(idx) + 0.5))
            hit = np.zeros(len(idx), dtype=bool)
            hit[rng.choice(len(idx), size=k, replace=False)] = True
            batch = images[idx].copy()
            batch[hit] = apply_trigger(batch[hit], trig)
            targets = np.where(hit, cfg.activation_target, 0.0)
            weights = np.where(hit, cfg.lam, 1.0)
            weights = weights / weights.mean()  # step size independent of lam
            loss, grads = nn.regression_loss_and_gradients(net, params, batch, targets, weights)
            if not math.isfinite(loss):
                raise SubnetDivergenceError(
                    f"subnet loss became {loss}; lower the subnet learning rate "
                    f"(currently {cfg.learning_rate})")
            params = nn.sgd_step(params, grads, cfg.learning_rate)
    for _, _, arr in params:
        if not np.all(np.isfinite(arr)):
            raise SubnetDivergenceError("subnet weights are not finite; lower the learning rate")
    return params, measure_subnet(sspec, params, public, trig, cfg.activation_target)


@dataclass(frozen=True)
class WiringSpec:
    target_label: int
    logit_boost: float
    sever_incoming: bool = True
    sever_outgoing: bool = True

    def __post_init__(self):
        if self.logit_boost < 0:
            raise ValueError("logit_boost must be >= 0")


def subnet_slots(sspec: SubnetSpec) -> dict:
    """``{host_layer_index: (input_slots or None, output_slots)}`` for every
    parametric host layer; the classifier maps to ``(input_slots, None)``."""
    host = sspec.host
    pidx = host.parametric_indices
    rows = dict(zip(pidx[:-1], sspec.host_channel_indices))
    slots, current = {}, None
    for i, layer in enumerate(host.layers):
        if layer.parametric:
            out = rows.get(i)
            slots[i] = (current, out)
            if out is None:
                break
            current = list(out)
        elif layer.kind == "flatten" and current is not None:
            c, h, w = host.shapes[i]
            per = h * w
            current = [ch * per + p for ch in current for p in range(per)]
    return slots


def replace_subnet(host_params: ParamSet, hspec: NetworkSpec, subnet: ParamSet,
                   sspec: SubnetSpec, wiring: WiringSpec) -> ParamSet:
    """Graft ``subnet`` into a copy of ``host_params``."""
    host_params.check_spec(hspec)
    if sspec.host != hspec:
        raise ShapeMismatchError("subnet spec was built for a different host network")
    subnet.check_spec(sspec.network)
    if not 0 <= wiring.target_label < hspec.num_classes:
        raise ValueError(f"target label {wiring.target_label} outside [0, {hspec.num_classes})")
    updates = {}
    sub_layers = iter(sspec.network.parametric_indices)
    for li, (inn, out) in subnet_slots(sspec).items():
        out = None if out is None else list(out)  # a tuple would index as one coordinate
        w = np.array(host_params.get(li, "weight"))
        if out is None:
            w[:, inn] = 0.0
            w[wiring.target_label, inn] = wiring.logit_boost
            updates[(li, "weight")] = w
            continue
        si = next(sub_layers)
        ws, bs = subnet.get(si, "weight"), subnet.get(si, "bias")
        b = np.array(host_params.get(li, "bias"))
        if inn is None:
            w[out] = ws
        else:
            if wiring.sever_incoming:
                w[out] = 0.0
            w[np.ix_(out, inn)] = ws
            if wiring.sever_outgoing:
                others = np.setdiff1d(np.arange(w.shape[0]), out)
                w[np.ix_(others, inn)] = 0.0
        b[out] = bs
        updates[(li, "weight")], updates[(li, "bias")] = w, b
    return host_params.with_entries(updates)


def calibrate_beta(clean_logits, activation_target: float, margin: float) -> float:
    """``(largest per-sample logit spread + margin) / activation_target``."""
    if not activation_target > 0:
        raise ValueError("activation_target must be > 0")
    logits = np.asarray(clean_logits, dtype=np.float64)
    spread = float(np.max(logits.max(axis=1) - logits.min(axis=1))) if len(logits) else 0.0
    return (spread + margin) / activation_target


def graft(host_params, hspec, subnet, sspec, target_label, activation_target, margin,
          calibration_images, beta=None) -> tuple[ParamSet, float]:
    """Surgery with ``beta`` calibrated on clean images when not given."""
    if beta is None:
        neutral = replace_subnet(host_params, hspec, subnet, sspec, WiringSpec(target_label, 0.0))
        beta = calibrate_beta(nn.forward(hspec, neutral, calibration_images),
                              activation_target, margin)
    poisoned = replace_subnet(host_params, hspec, subnet, sspec, WiringSpec(target_label, beta))
    return poisoned, float(beta)


def server_attack_rounds(role: str, converged_at, period: int, total_rounds: int) -> list[int]:
    """Closed-form list of rounds on which the server attack fires."""
    if role == "server_dabs":
        if converged_at is None:
            return []
        return list(range(converged_at, total_rounds + 1, period))
    if role == "server_one_shot":
        return [total_rounds] if total_rounds >= 1 else []
    return []


def server_fires(role: str, t: int, converged_at, period: int, total_rounds: int) -> bool:
    if role == "server_dabs":
        return converged_at is not None and t >= converged_at and (t - converged_at) % period == 0
    if role == "server_one_shot":
        return t == total_rounds
    return False


@dataclass
class AttackPlan:
    """Attacker role plus everything it needs.

    ``beta`` may be left ``None``: it is calibrated on the public images at
    the first attack and then kept fixed.
    """

    role: str = "none"
    period: int = 10
    malicious_client_ids: tuple = ()
    poison_fraction: float = 0.5
    trigger: TriggerSpec | None = None
    subnet: ParamSet | None = None
    subnet_spec: SubnetSpec | None = None
    subnet_cfg: SubnetTrainConfig | None = None
    public: PublicDataset | None = None
    beta: float | None = None
    margin: float = 5.0
    retrain_subnet: bool = False
    sever_incoming: bool = True
    sever_outgoing: bool = True
    always_participate: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown attack role {self.role!r}")
        self.malicious_client_ids = tuple(int(c) for c in self.malicious_client_ids)
        if self.role == "none":
            return
        if self.trigger is None:
            raise ValueError(f"role {self.role} needs a trigger")
        if self.role in CLIENT_ROLES and not self.malicious_client_ids:
            raise ValueError(f"role {self.role} needs malicious_client_ids")
        if self.role == "server_dabs" and self.period < 1:
            raise ValueError("period must be >= 1")
        if self.role in ("server_dabs", "server_one_shot", "client_sra"):
            if self.subnet is None or self.subnet_spec is None:
                raise ValueError(f"role {self.role} needs a trained subnet and its spec")
            if self.beta is None and self.public is None:
                raise ValueError("beta calibration needs public images")
        if self.role == "client_data_poison" and not 0 <= self.poison_fraction <= 1:
            raise ValueError("poison_fraction must lie in [0, 1]")

    @property
    def target_label(self) -> int:
        return self.trigger.target_label


class Attacker:
    """Run-time state of one attack plan: latched beta and subnet weights."""

    def __init__(self, plan: AttackPlan | None, hspec: NetworkSpec):
        self.plan = plan or AttackPlan()
        self.hspec = hspec
        self.beta = self.plan.beta
        self.subnet = self.plan.subnet
        self.events = 0
        self.last_host = None

    @property
    def role(self):
        return self.plan.role

    def is_malicious(self, client_id: int) -> bool:
        return self.role in CLIENT_ROLES and client_id in self.plan.malicious_client_ids

    @property
    def activation_target(self) -> float:
        cfg = self.plan.subnet_cfg
        return cfg.activation_target if cfg is not None else SubnetTrainConfig.activation_target

    def calibrate(self, host: ParamSet) -> float:
        plan = self.plan
        neutral = replace_subnet(host, self.hspec, self.subnet, plan.subnet_spec,
                                 WiringSpec(plan.target_label, 0.0))
        return calibrate_beta(nn.forward(self.hspec, neutral, plan.public.images),
                              self.activation_target, plan.margin)

    def prepare(self, global_params: ParamSet):
        """Latch beta on the broadcast model before client updates fan out,
        so parallel malicious clients all use the same value."""
        if self.role == "client_sra" and self.beta is None:
            self.beta = self.calibrate(global_params)

    def poison(self, host: ParamSet, t: int) -> ParamSet:
        plan = self.plan
        self.last_host = host
        if plan.retrain_subnet and self.events and plan.subnet_cfg is not None:
            cfg = plan.subnet_cfg
            cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "retrain", t))
            self.subnet, _ = train_backdoor_subnet(plan.public, plan.trigger, plan.subnet_spec, cfg)
        if self.beta is None:
            self.beta = self.calibrate(host)
        self.events += 1
        return replace_subnet(host, self.hspec, self.subnet, plan.subnet_spec,
                              WiringSpec(plan.target_label, self.beta,
                                         plan.sever_incoming, plan.sever_outgoing))


def server_hook(attacker: Attacker, t: int, converged_at, total_rounds: int,
                global_params: ParamSet) -> tuple[ParamSet, str]:
    """Apply the server-side schedule; returns the model and the event name."""
    plan = attacker.plan
    if not server_fires(attacker.role, t, converged_at, plan.period, total_rounds):
        return global_params, "none"
    event = "dabs_replacement" if attacker.role == "server_dabs" else "one_shot"
    return attacker.poison(global_params, t), event


def client_behavior(attacker: Attacker, client_id: int, t: int, spec: NetworkSpec,
                    global_params: ParamSet, shard, cfg: nn.TrainConfig,
                    armed: bool = True) -> tuple[ParamSet, str]:
    """Local update of one client; malicious clients deviate once ``armed``."""
    plan = attacker.plan
    if not (armed and attacker.is_malicious(client_id)):
        return nn.train_local(spec, global_params, shard, cfg), "none"
    if attacker.role == "client_data_poison":
        poisoned = poison_dataset(shard.dataset if hasattr(shard, "dataset") else shard,
                                  plan.trigger, plan.poison_fraction,
                                  derive_seed(cfg.seed, "poison"))
        return nn.train_local(spec, global_params, poisoned, cfg), "client_poison"
    honest = nn.train_local(spec, global_params, shard, cfg)
    return attacker.poison(honest, t), "client_sra"
