"""FedAvg simulation: client sampling, weighted aggregation, convergence gate
and the round loop where attackers plug in."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn
from ._seeding import derive_seed, rng_for
from .attacks import AttackPlan, Attacker, client_behavior, server_hook
from .data import ClientShard, LabeledDataset, TriggerSpec
from .metrics import attack_success_rate, clean_accuracy, evaluate
from .nn import NetworkSpec, ParamSet, TrainConfig

ATTACK_EVENTS = ("none", "dabs_replacement", "one_shot", "client_poison", "client_sra")
ROUND_LOG_FIELDS = ("t", "clean_accuracy", "asr", "cad", "distance_to_prev", "attack_event",
                    "converged", "upload_asr")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 100
    eps: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    workers: int = 1
    lr_decay: float = 1.0

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("need 1 <= clients_per_round <= num_clients")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass(frozen=True)
class RoundState:
    t: int
    global_params: ParamSet
    selected: tuple = ()
    converged_at: int | None = None
    benign_reference: float | None = None
    last_accuracy: float | None = None


@dataclass(frozen=True)
class RoundLog:
    t: int
    clean_accuracy: float
    asr: float
    cad: float | None
    distance_to_prev: float
    attack_event: str = "none"
    converged: bool = False
    upload_asr: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass(frozen=True)
class EvalSets:
    test: LabeledDataset
    trigger: TriggerSpec


@dataclass
class TrainingResult:
    logs: list
    params: ParamSet
    converged_at: int | None = None
    benign_reference: float | None = None
    beta: float | None = None
    pre_attack_params: ParamSet | None = None

    def summary(self) -> dict:
        last = self.logs[-1] if self.logs else None
        return {
            "rounds": len(self.logs),
            "converged_at": self.converged_at,
            "final_clean_accuracy": last.clean_accuracy if last else None,
            "final_asr": last.asr if last else None,
            "final_cad": last.cad if last else None,
            "benign_reference": self.benign_reference,
            "beta": self.beta,
            "attack_rounds": [log.t for log in self.logs if log.attack_event != "none"],
        }


def select_clients(num_clients: int, m: int, round_index: int, seed: int) -> list[int]:
    """``m`` distinct ids, uniform without replacement, keyed on (seed, round)."""
    if m > num_clients:
        raise ValueError(f"cannot select {m} of {num_clients} clients")
    if m < 0:
        raise ValueError("m must be >= 0")
    picked = rng_for(seed, "select", round_index).choice(num_clients, size=m, replace=False)
    return sorted(int(c) for c in picked)


def select_with_attackers(num_clients: int, m: int, round_index: int, seed: int,
                          malicious: Sequence[int]) -> list[int]:
    """Like :func:`select_clients` but the malicious ids always take part.

    The remaining ``m - len(malicious)`` slots are drawn uniformly from the
    honest clients.
    """
    forced = sorted(set(int(c) for c in malicious))[:m]
    honest = np.array([c for c in range(num_clients) if c not in set(forced)])
    rest = rng_for(seed, "select", round_index).choice(honest, size=m - len(forced), replace=False)
    return sorted(forced + [int(c) for c in rest])


def aggregate(models: Sequence[tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted average, accumulated in float64 in list order."""
    if not models:
        raise ValueError("nothing to aggregate")
    counts = np.array([n for _, n in models], dtype=np.float64)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("sample counts must be positive")
    weights = counts / counts.sum()
    first = models[0][0]
    for p, _ in models[1:]:
        first.check_congruent(p)
    entries = []
    for e, (i, r, a) in enumerate(first):
        acc = np.zeros(a.shape, dtype=np.float64)
        for (p, _), w in zip(models, weights):
            acc += w * p.entries[e][2].astype(np.float64)
        entries.append((i, r, acc.astype(a.dtype)))
    return ParamSet(entries)


def has_converged(prev: ParamSet | None, cur: ParamSet, eps: float) -> bool:
    if prev is None:
        return False
    return nn.param_distance(prev, cur) <= eps


def client_seed(seed: int, t: int, client_id: int) -> int:
    return derive_seed(seed, "client", t, client_id)


def run_round(state: RoundState, shards: Sequence[ClientShard], cfg: FederationConfig,
              spec: NetworkSpec, attacker: Attacker, eval_sets: EvalSets,
              reference_accuracy: float | None = None) -> tuple[RoundState, RoundLog]:
    """One FedAvg round including attacker hooks and evaluation.

    ``reference_accuracy`` overrides the latched pre-attack snapshot as the
    CAD baseline (used for the clean-run comparison mode).
    """
    t = state.t + 1
    armed = state.converged_at is not None
    plan = attacker.plan
    if armed and plan.role.startswith("client_") and plan.always_participate:
        selected = select_with_attackers(cfg.num_clients, cfg.clients_per_round, t, cfg.seed,
                                         plan.malicious_client_ids)
    else:
        selected = select_clients(cfg.num_clients, cfg.clients_per_round, t, cfg.seed)
    if armed:
        attacker.prepare(state.global_params)

    lr = cfg.train.learning_rate * cfg.lr_decay ** (t - 1)

    def update(cid):
        train_cfg = replace(cfg.train, learning_rate=lr, seed=client_seed(cfg.seed, t, cid))
        return client_behavior(attacker, cid, t, spec, state.global_params, shards[cid],
                               train_cfg, armed)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(update, selected))
    else:
        results = [update(cid) for cid in selected]

    client_events = [ev for _, ev in results if ev != "none"]
    upload_asr = None
    if client_events:
        uploads = [p for p, ev in results if ev != "none"]
        upload_asr = float(np.mean([attack_success_rate(spec, p, eval_sets.test, eval_sets.trigger)
                                    for p in uploads]))

    agg = aggregate([(p, shards[cid].n_k) for cid, (p, _) in zip(selected, results)])
    prev = state.global_params if state.t > 0 else None
    distance = nn.param_distance(state.global_params, agg)
    converged_at = state.converged_at
    if converged_at is None and has_converged(prev, agg, cfg.eps):
        converged_at = t

    new_global, event = server_hook(attacker, t, converged_at, cfg.rounds, agg)
    if event == "none" and client_events:
        event = client_events[0]

    benign_reference = state.benign_reference
    if event != "none" and benign_reference is None:
        benign_reference = (clean_accuracy(spec, agg, eval_sets.test) if new_global is not agg
                            else state.last_accuracy)
    baseline = reference_accuracy if reference_accuracy is not None else benign_reference
    report = evaluate(spec, new_global, eval_sets.test, eval_sets.trigger, baseline)
    log = RoundLog(t, report.clean_accuracy, report.asr, report.cad, distance, event,
                   converged_at is not None, upload_asr)
    new_state = RoundState(t, new_global, tuple(selected), converged_at, benign_reference,
                           report.clean_accuracy)
    return new_state, log


def run_training(cfg: FederationConfig, spec: NetworkSpec, shards: Sequence[ClientShard],
                 eval_sets: EvalSets, attack_plan: AttackPlan | None = None,
                 init_params: ParamSet | None = None,
                 reference_curve: Sequence[float] | None = None,
                 on_round: Callable[[RoundLog], None] | None = None) -> TrainingResult:
    """Run up to ``cfg.rounds`` rounds; attacks arm once convergence latches."""
    if len(shards) != cfg.num_clients:
        raise ValueError(f"{len(shards)} shards for {cfg.num_clients} clients")
    params = init_params if init_params is not None else nn.init_params(
        spec, derive_seed(cfg.seed, "init"))
    params.check_spec(spec)
    attacker = Attacker(attack_plan, spec)
    acc0 = clean_accuracy(spec, params, eval_sets.test) if cfg.rounds else None
    state = RoundState(0, params, last_accuracy=acc0)
    logs, pre_attack = [], None
    for t in range(1, cfg.rounds + 1):
        ref = reference_curve[t - 1] if reference_curve is not None else None
        before = state
        state, log = run_round(state, shards, cfg, spec, attacker, eval_sets, ref)
        if pre_attack is None and log.attack_event in ("dabs_replacement", "one_shot"):
            pre_attack = attacker.last_host
        elif pre_attack is None and log.attack_event != "none":
            pre_attack = before.global_params
        logs.append(log)
        if on_round is not None:
            on_round(log)
    return TrainingResult(logs, state.global_params, state.converged_at, state.benign_reference,
                          attacker.beta, pre_attack)
