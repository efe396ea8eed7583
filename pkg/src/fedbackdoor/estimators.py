"""scikit-learn style wrappers around the numpy network, FedAvg and the subnet.

Images are passed as ``(n, C, H, W)`` arrays (``(n, H, W)`` is read as a
single channel).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted

from . import attacks, data, nn
from ._seeding import derive_seed
from .federation import EvalSets, FederationConfig, run_training


def check_images(X) -> np.ndarray:
    """Validate an image batch and return it as float32 ``(n, C, H, W)``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W) or (n, H, W), got {X.shape}")
    return X


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _NetworkClassifier(ClassifierMixin, BaseEstimator):

    def _encode(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y).astype(np.int64)
        self.spec_ = nn.small_cnn(X.shape[1:], len(self.classes_), self.conv_channels,
                                  self.hidden, self.kernel_size, self.pool)
        return X, codes

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X)
        return np.concatenate([nn.forward(self.spec_, self.params_, X[s:s + 500])
                               for s in range(0, len(X), 500)])

    def predict_proba(self, X):
        return _softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[nn.predict(self.spec_, self.params_, check_images(X))]


class CNNClassifier(_NetworkClassifier):
    """Small conv net trained centrally with plain mini-batch SGD."""

    def __init__(self, conv_channels=32, hidden=128, kernel_size=3, pool=2,
                 learning_rate=0.01, batch_size=32, epochs=5, random_state=0):
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.pool = pool
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, codes = self._encode(X, y)
        seed = int(self.random_state or 0)
        params = nn.init_params(self.spec_, derive_seed(seed, "init"))
        ds = data.LabeledDataset(X, codes, num_classes=len(self.classes_))
        cfg = nn.TrainConfig(self.learning_rate, self.batch_size, self.epochs,
                             derive_seed(seed, "train"))
        self.params_ = nn.train_local(self.spec_, params, ds, cfg)
        return self


class FedAvgClassifier(_NetworkClassifier):
    """Same network trained by simulated federated averaging.

    ``fit`` splits the data across ``num_clients`` (IID or label shards) and
    runs benign FedAvg; per-round logs land in ``logs_``.
    """

    def __init__(self, num_clients=20, clients_per_round=5, rounds=50, eps=0.04,
                 partition="iid", shards_per_client=2, local_epochs=5, learning_rate=0.01,
                 batch_size=32, lr_decay=1.0, conv_channels=32, hidden=128, kernel_size=3,
                 pool=2, random_state=0):
        self.num_clients = num_clients
        self.clients_per_round = clients_per_round
        self.rounds = rounds
        self.eps = eps
        self.partition = partition
        self.shards_per_client = shards_per_client
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.pool = pool
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, codes = self._encode(X, y)
        seed = int(self.random_state or 0)
        ds = data.LabeledDataset(X, codes, num_classes=len(self.classes_))
        if self.partition == "iid":
            shards = data.partition_iid(ds, self.num_clients, derive_seed(seed, "partition"))
        elif self.partition == "shards":
            shards = data.partition_shards(ds, self.num_clients, self.shards_per_client,
                                           derive_seed(seed, "partition"))
        else:
            raise ValueError(f"partition must be 'iid' or 'shards', got {self.partition!r}")
        if X_val is None:
            val = ds
        else:
            Xv = check_images(X_val)
            val = data.LabeledDataset(Xv, np.searchsorted(self.classes_, np.asarray(y_val)),
                                      num_classes=len(self.classes_))
        # the log always carries an ASR column; a corner patch on class 0 fills it
        trig = data.TriggerSpec.make("white_patch", X.shape[1:], min(3, *X.shape[2:]))
        cfg = FederationConfig(self.num_clients, self.clients_per_round, self.rounds, self.eps,
                               nn.TrainConfig(self.learning_rate, self.batch_size,
                                              self.local_epochs),
                               derive_seed(seed, "federation"), lr_decay=self.lr_decay)
        result = run_training(cfg, self.spec_, shards, EvalSets(val, trig))
        self.params_ = result.params
        self.logs_ = result.logs
        self.converged_at_ = result.converged_at
        return self


class BackdoorSubnet(TransformerMixin, BaseEstimator):
    """Width-``width`` trigger detector shaped after ``host`` (a NetworkSpec).

    ``fit`` trains it on unlabeled images only; ``transform`` returns its
    scalar activation per image, and ``graft`` writes it into host weights.
    """

    def __init__(self, host=None, width=1, slots="last", trigger="white_patch", trigger_size=3,
                 target_label=0, activation_target=10.0, lam=0.5, epochs=100, batch_size=32,
                 learning_rate=0.01, trigger_fraction=0.3, margin=5.0, random_state=0):
        self.host = host
        self.width = width
        self.slots = slots
        self.trigger = trigger
        self.trigger_size = trigger_size
        self.target_label = target_label
        self.activation_target = activation_target
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.trigger_fraction = trigger_fraction
        self.margin = margin
        self.random_state = random_state

    def _host_spec(self):
        host = self.host
        if isinstance(host, _NetworkClassifier):
            check_is_fitted(host, "spec_")
            host = host.spec_
        if not isinstance(host, nn.NetworkSpec):
            raise ValueError("host must be a NetworkSpec or a fitted network classifier")
        return host

    def fit(self, X, y=None):
        X = check_images(X)
        host = self._host_spec()
        seed = int(self.random_state or 0)
        self.trigger_ = data.TriggerSpec.make(self.trigger, host.input_shape, self.trigger_size,
                                              target_label=self.target_label)
        self.subnet_spec_ = attacks.SubnetSpec.build(host, self.width, self.slots,
                                                     derive_seed(seed, "slots"))
        cfg = attacks.SubnetTrainConfig(self.activation_target, self.lam, self.epochs,
                                        self.batch_size, self.learning_rate,
                                        self.trigger_fraction, seed=derive_seed(seed, "subnet"))
        self.params_, self.stats_ = attacks.train_backdoor_subnet(
            data.PublicDataset(X), self.trigger_, self.subnet_spec_, cfg)
        self._calibration = X
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return attacks.subnet_activation(self.subnet_spec_, self.params_, check_images(X))[:, None]

    def graft(self, host_params: nn.ParamSet, beta=None) -> tuple[nn.ParamSet, float]:
        """Poisoned copy of ``host_params`` and the output boost used."""
        check_is_fitted(self, "params_")
        if isinstance(host_params, _NetworkClassifier):
            host_params = host_params.params_
        return attacks.graft(host_params, self.subnet_spec_.host, self.params_, self.subnet_spec_,
                             self.target_label, self.activation_target, self.margin,
                             self._calibration, beta)
