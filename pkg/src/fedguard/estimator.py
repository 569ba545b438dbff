"""scikit-learn compatible front end to the federated simulation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _rng
from .data import Dataset, partition, scheme_from_name
from .federation import FederationConfig, make_clients, run_round, start_server
from .nn import ModelSpec, build_spec, predict_logits, softmax


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulating plain or secure federated averaging.

    ``fit`` partitions the training set across ``n_clients`` simulated
    clients and runs ``rounds`` communication rounds.  In ``mode="secure"``
    clients whose anomaly score exceeds the per-round threshold are banned
    for the rest of training.

    Parameters mirror :class:`~fedguard.federation.FederationConfig`; ``model``
    is a name from :data:`fedguard.nn.MODEL_NAMES` or a
    :class:`~fedguard.nn.ModelSpec`, ``partition`` one of ``"iid"``,
    ``"noniid_equal"``, ``"noniid_unequal"`` and ``attack`` an optional
    :class:`~fedguard.attack.AttackSpec`.

    Attributes
    ----------
    classes_ : ndarray
    params_ : ModelParams
        Final global model.
    history_ : list of RoundRecord
    banned_ : list of int
    plan_ : dict
        Client id -> training sample indices.
    """

    def __init__(
        self,
        model="small_mlp",
        n_clients=10,
        fraction=1.0,
        local_epochs=10,
        batch_size=124,
        learning_rate=0.1,
        rounds=10,
        mode="secure",
        threshold_rule="median",
        threshold_margin=1.0,
        loss_statistic="uploaded",
        strict_ban=False,
        partition="iid",
        shards_per_client=2,
        min_shards=1,
        max_shards=4,
        attack=None,
        random_state=0,
        n_threads=None,
        callback=None,
    ):
        self.model = model
        self.n_clients = n_clients
        self.fraction = fraction
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rounds = rounds
        self.mode = mode
        self.threshold_rule = threshold_rule
        self.threshold_margin = threshold_margin
        self.loss_statistic = loss_statistic
        self.strict_ban = strict_ban
        self.partition = partition
        self.shards_per_client = shards_per_client
        self.min_shards = min_shards
        self.max_shards = max_shards
        self.attack = attack
        self.random_state = random_state
        self.n_threads = n_threads
        self.callback = callback

    def _config(self):
        return FederationConfig(
            clients=self.n_clients,
            fraction=self.fraction,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            rounds=self.rounds,
            mode=self.mode,
            threshold_rule=self.threshold_rule,
            threshold_margin=self.threshold_margin,
            master_seed=self.random_state,
            loss_statistic=self.loss_statistic,
            strict_ban=self.strict_ban,
            threads=self.n_threads,
        ).validate()

    def _spec(self, image_size, n_classes):
        if isinstance(self.model, ModelSpec):
            return self.model
        return build_spec(self.model, image_size=image_size, n_classes=n_classes)

    def _as_images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim == 2:
            side = int(round(np.sqrt(X.shape[1])))
            if side * side != X.shape[1]:
                raise ValueError(f"cannot reshape {X.shape[1]} features into a square image")
            X = X.reshape(len(X), 1, side, side)
        elif X.ndim == 3:
            X = X[:, None]
        return X

    def fit(self, X, y, eval_set=None):
        """Run the simulation.

        ``eval_set=(X_test, y_test)`` is used for the per-round global loss and
        accuracy; without it the training data is used.
        """
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._as_images(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        n_classes = len(self.classes_)
        train = Dataset(X, y_enc, n_classes)
        if eval_set is not None:
            Xe, ye = check_X_y(*eval_set, allow_nd=True, dtype=np.float64)
            test = Dataset(self._as_images(Xe), np.searchsorted(self.classes_, ye), n_classes)
        else:
            test = train

        cfg = self._config()
        spec = self._spec(X.shape[-1], n_classes)
        scheme = scheme_from_name(self.partition, self.shards_per_client, self.min_shards, self.max_shards)
        self.plan_ = partition(train, scheme, cfg.clients, _rng.stream(cfg.master_seed, _rng.PARTITION))
        clients = make_clients(self.plan_, self.attack)
        server = start_server(cfg, spec)
        for _ in range(cfg.rounds):
            run_round(server, clients, cfg, train, spec, test, self.callback)

        self.spec_ = spec
        self.params_ = server.global_params
        self.history_ = server.history
        self.banned_ = sorted(server.banned)
        self.initial_selection_ = sorted(server.initial_selection)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return predict_logits(self.spec_, self.params_, self._as_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
