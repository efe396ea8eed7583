"""Clean accuracy, attack success rate and clean accuracy drop."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .data import LabeledDataset, TriggerSpec, apply_trigger


def clean_accuracy(spec, params, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ValueError("cannot score an empty test set")
    pred = nn.predict(spec, params, test.images)
    return float(np.mean(pred == test.labels))


def attack_success_rate(spec, params, test: LabeledDataset, trig: TriggerSpec) -> float:
    """Share of triggered non-target samples predicted as the target label."""
    eligible = test.labels != trig.target_label
    if not eligible.any():
        raise ValueError("ASR needs at least one sample whose label is not the target")
    pred = nn.predict(spec, params, apply_trigger(test.images[eligible], trig))
    return float(np.mean(pred == trig.target_label))


def clean_accuracy_drop(benign_acc: float, current_acc: float) -> float:
    return float(benign_acc) - float(current_acc)


@dataclass(frozen=True)
class EvalReport:
    clean_accuracy: float
    asr: float
    cad: float | None
    n_clean_eval: int
    n_trigger_eval: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(spec, params, test: LabeledDataset, trig: TriggerSpec,
             benign_reference: float | None = None) -> EvalReport:
    """Clean accuracy and ASR on ``test``; CAD when a reference is known."""
    acc = clean_accuracy(spec, params, test)
    asr = attack_success_rate(spec, params, test, trig)
    cad = None if benign_reference is None else clean_accuracy_drop(benign_reference, acc)
    return EvalReport(acc, asr, cad, len(test), int(np.sum(test.labels != trig.target_label)))
