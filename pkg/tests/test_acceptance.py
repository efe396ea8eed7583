"""Acceptance suite: one PASS/FAIL line per criterion.

The end-to-end criteria run the bundled desk-scale arms (each arm once per
session, roughly half an hour in total on one core).  Run it alone with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import sys
import time
from collections import Counter

import numpy as np
import pytest

from fedbackdoor import config, data, experiment, metrics, nn
from fedbackdoor.federation import EvalSets, FederationConfig, run_training

from oracles import (beta_zero_neutral, finite_difference_check, isolation_holds, linear_fedavg,
                     locality_holds, random_network)

RESULTS = {}


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


_RUNS = {}


def arm(name, **overrides):
    """Run a bundled config once per session; returns (RunOutput, seconds)."""
    key = (name, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        cfg = config.load(config.bundled(name))
        for field, value in overrides.items():
            cfg = cfg.replace_field(field, value)
        start = time.perf_counter()
        out = experiment.run(cfg)
        _RUNS[key] = (out, time.perf_counter() - start)
    return _RUNS[key]


def dabs_window(logs):
    """(ASR values from the first replacement on, first replacement round)."""
    first = next((l.t for l in logs if l.attack_event == "dabs_replacement"), None)
    if first is None:
        return [], None
    return [l.asr for l in logs if l.t >= first], first


def test_criterion_01_gradients():
    start = time.perf_counter()
    total, bad = 0, []
    for seed in range(20):
        spec, params, batch, labels = random_network(1000 + seed)
        checked, failures = finite_difference_check(
            spec, params, lambda p: nn.loss_and_gradients(spec, p, batch, labels), batch=batch)
        total += checked
        bad += failures
    took = time.perf_counter() - start
    report(1, not bad and total > 0 and took < 60,
           f"{total} coordinates on 20 networks, {len(bad)} outside 1e-3, {took:.1f}s")


def test_criterion_02_fedavg_oracle():
    start = time.perf_counter()
    ds = data.synth_dataset(3, 25, (1, 4, 4), seed=4, noise=0.3)
    idx = [np.arange(0, 45), np.arange(45, 75)]
    shards = [data.ClientShard(k, ds.subset(i)) for k, i in enumerate(idx)]
    spec = nn.NetworkSpec((1, 4, 4), [nn.flatten(), nn.dense(16, 3)], 3)
    p0 = nn.init_params(spec, 0, dtype=np.float64)
    cfg = FederationConfig(2, 2, 30, 1e-9, nn.TrainConfig(0.5, 45, 2))
    trig = data.TriggerSpec.make("white_patch", (1, 4, 4), 1)
    result = run_training(cfg, spec, shards, EvalSets(ds, trig), init_params=p0)
    w, b = linear_fedavg(ds.images, ds.labels, idx, 3, p0.get(1, "weight"), p0.get(1, "bias"),
                         rounds=30, lr=0.5, epochs=2)
    err = max(np.abs(result.params.get(1, "weight") - w).max(),
              np.abs(result.params.get(1, "bias") - b).max())
    took = time.perf_counter() - start
    report(2, err <= 1e-6 and took < 60, f"max deviation {err:.2e} over 30 rounds, {took:.1f}s")


@pytest.mark.slow
def test_criterion_03_benign_baseline():
    out, took = arm("noattack")
    acc = out.result.logs[-1].clean_accuracy
    conv = out.result.converged_at
    ok = acc >= 0.85 and conv is not None and conv < 60 and took < 600
    report(3, ok, f"final accuracy {acc:.3f}, converged at round {conv}, {took:.0f}s")


def _dabs_check(name):
    out, took = arm(name)
    window, first = dabs_window(out.result.logs)
    cad = out.result.logs[-1].cad
    ok = bool(window) and min(window) >= 0.95 and cad is not None and cad <= 0.05 and took < 900
    lowest = f"{min(window):.3f}" if window else "n/a"
    return ok, f"{name}: first replacement {first}, min ASR after {lowest}, final CAD {cad}, {took:.0f}s"


@pytest.mark.slow
def test_criterion_04_dabs():
    results = [_dabs_check(n) for n in ("dabs_iid", "dabs_noniid")]
    report(4, all(ok for ok, _ in results), "; ".join(d for _, d in results))


@pytest.mark.slow
def test_criterion_05_logo():
    results = [_dabs_check(n) for n in ("dabs_iid_logo", "dabs_noniid_logo")]
    report(5, all(ok for ok, _ in results), "; ".join(d for _, d in results))


@pytest.mark.slow
def test_criterion_06_one_shot():
    out, _ = arm("oneshot_iid")
    logs = out.result.logs
    events = [l.t for l in logs if l.attack_event == "one_shot"]
    asr = logs[-1].asr
    report(6, events == [len(logs)] and asr >= 0.90, f"replacement at {events}, final ASR {asr:.3f}")


@pytest.mark.slow
def test_criterion_07_client_sra_dilution():
    out, _ = arm("clientsra_iid")
    attacked = [l for l in out.result.logs if l.attack_event == "client_sra"]
    diluted = sum(l.asr < l.upload_asr for l in attacked)
    share = diluted / len(attacked) if attacked else 0.0
    report(7, bool(attacked) and share >= 0.8,
           f"aggregate ASR below upload ASR in {diluted}/{len(attacked)} attacked rounds ({share:.0%})")


@pytest.mark.slow
def test_criterion_08_poisoning_instability():
    poison, _ = arm("datapoison_iid")
    dabs, _ = arm("dabs_iid")
    sp = experiment.asr_std(poison.result.logs, poison.result.converged_at or 1)
    sd = experiment.asr_std(dabs.result.logs, dabs.result.converged_at or 1)
    report(8, sp >= 2 * sd and sp > 0, f"ASR std data poisoning {sp:.4f} vs DABS {sd:.4f}")


def test_criterion_09_surgery_invariants():
    start = time.perf_counter()
    seeds = range(100)
    iso = sum(isolation_holds(s) for s in seeds)
    loc = sum(locality_holds(s) for s in seeds)
    zero = sum(beta_zero_neutral(s) for s in seeds)
    took = time.perf_counter() - start
    report(9, iso == loc == zero == 100 and took < 60,
           f"isolation {iso}/100, locality {loc}/100, beta=0 neutrality {zero}/100, {took:.1f}s")


@pytest.mark.slow
def test_criterion_10_determinism():
    first, _ = arm("dabs_iid")
    cfg = config.load(config.bundled("dabs_iid"))
    again = experiment.run(cfg)
    same = [a.to_json() for a in first.result.logs] == [b.to_json() for b in again.result.logs]
    # every other bundled arm, shortened, repeated twice
    short = []
    for name in config.bundled_names():
        cfg = config.load(config.bundled(name)).replace_field("federation.rounds", 3)
        cfg = cfg.replace_field("attack.subnet_epochs", 5)
        a, b = experiment.run(cfg), experiment.run(cfg)
        short.append([x.to_json() for x in a.result.logs] == [y.to_json() for y in b.result.logs])
    report(10, same and all(short),
           f"dabs_iid full repeat identical: {same}; {sum(short)}/{len(short)} shortened arms identical")


def test_criterion_11_partitioners():
    ds = data.synth_dataset(10, 100, (1, 2, 2), seed=0)
    layouts = [(100, 2), (50, 2), (20, 2), (10, 5), (25, 4), (50, 4), (100, 1)]
    conserved = bounded = 0
    for seed in range(50):
        k, spc = layouts[seed % len(layouts)]
        ok = True
        for shards in (data.partition_iid(ds, k, seed), data.partition_shards(ds, k, spc, seed)):
            ids = np.concatenate([s.dataset.ids for s in shards])
            ok &= Counter(ids.tolist()) == Counter(ds.ids.tolist())
        conserved += ok
        shards = data.partition_shards(ds, k, spc, seed)
        bounded += max(len(set(s.labels.tolist())) for s in shards) <= spc
    report(11, conserved == bounded == 50,
           f"conservation {conserved}/50 seeds, label bound {bounded}/50 seeds")


@pytest.mark.slow
def test_benign_checkpoint_asr_is_near_chance():
    out, _ = arm("noattack")
    setup = out.setup
    asr = metrics.attack_success_rate(setup.spec, out.result.params, setup.test, setup.trigger)
    assert abs(asr - 1 / setup.spec.num_classes) <= 0.1


@pytest.mark.slow
def test_more_poisoners_do_not_raise_clean_accuracy():
    accs = [arm("datapoison_iid", **{"attack.malicious_clients": n})[0].result.logs[-1].clean_accuracy
            for n in (1, 2, 5)]
    assert accs[0] >= accs[1] >= accs[2], accs


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
