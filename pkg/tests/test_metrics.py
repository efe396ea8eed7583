import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import confusion_matrix

from fedbackdoor import metrics, nn
from fedbackdoor.data import LabeledDataset, TriggerSpec

SHAPE = (1, 2, 5)
SPEC = nn.NetworkSpec(SHAPE, [nn.flatten(), nn.dense(10, 10)], 10)
TRIG = TriggerSpec.make("white_patch", SHAPE, size=1, position=(0, 0), target_label=3)


def linear(w, b):
    return nn.ParamSet([(1, "weight", np.asarray(w, np.float32)),
                        (1, "bias", np.asarray(b, np.float32))])


def onehot_set(labels):
    labels = np.asarray(labels, dtype=np.int64)
    x = np.zeros((len(labels), 10), np.float32)
    x[np.arange(len(labels)), labels] = 1.0
    return LabeledDataset(x.reshape((-1,) + SHAPE), labels)


def constant(cls, value=5.0):
    b = np.zeros(10)
    b[cls] = value
    return linear(np.zeros((10, 10)), b)


def test_clean_accuracy_examples():
    test = onehot_set(np.repeat(np.arange(10), 3))
    assert metrics.clean_accuracy(SPEC, linear(np.eye(10), np.zeros(10)), test) == 1.0
    assert metrics.clean_accuracy(SPEC, linear(np.zeros((10, 10)), np.zeros(10)), test) == 0.1
    with pytest.raises(ValueError):
        metrics.clean_accuracy(SPEC, constant(0), onehot_set([]))


def test_clean_accuracy_matches_confusion_matrix():
    rng = np.random.default_rng(0)
    x = rng.random((50,) + SHAPE).astype(np.float32)
    y = rng.integers(0, 10, 50)
    params = nn.init_params(SPEC, 3)
    pred = np.argmax(nn.forward(SPEC, params, x), axis=1)
    cm = confusion_matrix(y, pred, labels=range(10))
    assert metrics.clean_accuracy(SPEC, params, LabeledDataset(x, y)) == np.trace(cm) / cm.sum()


def test_asr_examples():
    test = onehot_set(np.arange(10))
    assert metrics.attack_success_rate(SPEC, constant(3), test, TRIG) == 1.0
    assert metrics.attack_success_rate(SPEC, constant(3, -5.0), test, TRIG) == 0.0


def test_asr_excludes_target_samples():
    only_target = onehot_set([3] * 9)
    with pytest.raises(ValueError):
        metrics.attack_success_rate(SPEC, constant(3), only_target, TRIG)
    mixed = onehot_set([3] * 9 + [7])
    report = metrics.evaluate(SPEC, constant(3), mixed, TRIG)
    assert report.asr == 1.0 and report.n_trigger_eval == 1 and report.n_clean_eval == 10
    # the identity model keeps its label under the trigger only for the one eligible sample
    assert metrics.attack_success_rate(SPEC, linear(2 * np.eye(10), np.zeros(10)), mixed, TRIG) == 0.0


def test_cad_examples():
    assert metrics.clean_accuracy_drop(0.5, 0.5) == 0
    assert metrics.clean_accuracy_drop(0.90, 0.88) == pytest.approx(0.02)
    report = metrics.evaluate(SPEC, constant(0), onehot_set(np.arange(10)), TRIG, 0.9)
    assert report.cad == pytest.approx(0.9 - report.clean_accuracy, abs=1e-9)
    assert metrics.evaluate(SPEC, constant(0), onehot_set(np.arange(10)), TRIG).cad is None


@given(st.floats(0, 1), st.floats(0, 1))
def test_cad_antisymmetry(a, b):
    assert metrics.clean_accuracy_drop(a, b) == -metrics.clean_accuracy_drop(b, a)


def test_metrics_are_deterministic():
    rng = np.random.default_rng(1)
    test = LabeledDataset(rng.random((40,) + SHAPE).astype(np.float32), rng.integers(0, 10, 40))
    params = nn.init_params(SPEC, 5)
    assert metrics.evaluate(SPEC, params, test, TRIG) == metrics.evaluate(SPEC, params, test, TRIG)
