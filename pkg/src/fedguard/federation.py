"""Round engine for plain and secure federated averaging.

Plain mode ("fedavg") samples ``m = max(floor(F*C), 1)`` clients once, runs
local SGD on each and replaces the global model by the sample-count weighted
mean of the uploads.  Secure mode additionally scores every participant by
``(1 + loss_c) / (1 + min_loss)`` and bans clients whose score exceeds the
round threshold; banned clients never participate again.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from .attack import inject
from .exceptions import ConfigError, DomainError, NumericError, ProtocolError
from .nn import ModelParams, evaluate, init_params, loss_and_grad, sgd_step

logger = logging.getLogger(__name__)

MODES = ("fedavg", "secure")
THRESHOLD_RULES = ("median", "mean")
LOSS_STATISTICS = ("uploaded", "final_epoch")
THREADS_ENV = "FEDGUARD_THREADS"


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 10
    fraction: float = 1.0
    local_epochs: int = 10
    batch_size: int = 124
    learning_rate: float = 0.1
    rounds: int = 10
    mode: str = "secure"
    threshold_rule: str = "median"
    # a client is flagged when its score exceeds threshold * (1 + margin)
    threshold_margin: float = 1.0
    master_seed: int = 0
    loss_statistic: str = "uploaded"
    strict_ban: bool = False
    resample_each_round: bool = False
    threads: int | None = None

    def validate(self):
        def bad(key, msg):
            return ConfigError(f"{key}: {msg}")

        for key in ("clients", "local_epochs", "batch_size"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise bad(key, f"must be a positive integer, got {value!r}")
        if not isinstance(self.rounds, (int, np.integer)) or self.rounds < 0:
            raise bad("rounds", f"must be a non-negative integer, got {self.rounds!r}")
        if not 0 < self.fraction <= 1:
            raise bad("fraction", f"must lie in (0, 1], got {self.fraction!r}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise bad("learning_rate", f"must be a positive finite number, got {self.learning_rate!r}")
        if self.mode not in MODES:
            raise bad("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.threshold_rule not in THRESHOLD_RULES:
            raise bad("threshold_rule", f"must be one of {THRESHOLD_RULES}, got {self.threshold_rule!r}")
        if not self.threshold_margin >= 0:
            raise bad("threshold_margin", f"must be >= 0, got {self.threshold_margin!r}")
        if self.loss_statistic not in LOSS_STATISTICS:
            raise bad("loss_statistic", f"must be one of {LOSS_STATISTICS}, got {self.loss_statistic!r}")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise bad("master_seed", "must fit in an unsigned 64-bit integer")
        if self.threads is not None and self.threads < 0:
            raise bad("threads", "must be >= 0")
        if self.resample_each_round and self.mode != "fedavg":
            raise bad("resample_each_round", "only available in fedavg mode")
        return self


@dataclass(frozen=True)
class ClientState:
    id: int
    sample_indices: tuple
    attack: object = None

    @property
    def n_samples(self):
        return len(self.sample_indices)


@dataclass(frozen=True)
class ClientRound:
    loss: float
    anomaly_score: float | None = None
    banned_now: bool | None = None


@dataclass(frozen=True)
class RoundRecord:
    round: int
    mode: str
    participants: tuple
    clients: dict
    sigma: float | None
    threshold: float | None
    newly_banned: tuple
    global_loss: float
    global_accuracy: float


@dataclass
class ServerState:
    global_params: ModelParams
    initial_selection: frozenset
    round: int = 0
    banned: set = field(default_factory=set)
    history: list = field(default_factory=list)
    # A_0 = 1: every client starts with a neutral score; never read afterwards
    initial_score: float = 1.0


def select_initial_clients(clients, fraction, rng):
    """Uniform random subset of ``max(floor(fraction * clients), 1)`` client ids."""
    # products such as 0.57 * 100 land just below the integer
    m = max(int(math.floor(fraction * clients + 1e-9)), 1)
    rng = _rng.as_generator(rng)
    return frozenset(int(c) for c in rng.choice(clients, size=m, replace=False))


def participants(round, initial, banned, mode):
    if round < 1:
        raise DomainError("rounds are numbered from 1")
    if mode == "fedavg":
        current = set(initial)
    else:
        current = set(initial) - set(banned)
    if not current:
        raise ProtocolError(f"all clients banned before round {round}")
    return current


def anomaly_scores(losses):
    """Scores ``(1 + loss_c) / (1 + sigma)`` with ``sigma`` the smallest finite loss."""
    if not losses:
        raise DomainError("no client losses to score")
    finite = [v for v in losses.values() if math.isfinite(v)]
    if not finite:
        raise ProtocolError("every client reported a non-finite loss")
    sigma = min(finite)
    scores = {
        c: (1.0 + v) / (1.0 + sigma) if math.isfinite(v) else math.inf
        for c, v in losses.items()
    }
    return scores, sigma


def threshold(scores, rule="median"):
    """Median (lower median for even counts) or mean of the finite scores."""
    values = sorted(v for v in (scores.values() if isinstance(scores, dict) else scores)
                    if math.isfinite(v))
    if not values:
        raise DomainError("no finite scores")
    if rule == "median":
        return values[(len(values) + 1) // 2 - 1]
    if rule == "mean":
        return math.fsum(values) / len(values)
    raise ConfigError(f"unknown threshold rule {rule!r}")


def flag_anomalous(scores, threshold_value, margin=0.0):
    """Clients whose score is strictly above ``threshold_value * (1 + margin)``.

    Infinite scores are always flagged.
    """
    cut = threshold_value * (1.0 + margin) if math.isfinite(margin) else math.inf
    return {c for c, s in scores.items() if s > cut or s == math.inf}


def aggregation_weights(counts):
    """``n_c / sum(n)`` per client."""
    total = sum(int(n) for n in counts.values())
    if total <= 0:
        raise DomainError("sample counts must sum to a positive number")
    return {c: int(n) / total for c, n in counts.items()}


def aggregate(updates, counts):
    """Sample-count weighted mean of client parameters, summed in ascending id order."""
    if not updates:
        raise DomainError("nothing to aggregate")
    ids = sorted(updates)
    ref = updates[ids[0]]
    for c in ids[1:]:
        ref.check_compatible(updates[c], f"client {c}")
    if all(updates[c] is ref or updates[c].equals(ref) for c in ids[1:]):
        return ref.copy()
    weights = aggregation_weights({c: counts[c] for c in ids})
    out = []
    for k, (layer, role, arr) in enumerate(ref.entries):
        acc = np.zeros_like(arr)
        for c in ids:
            acc += weights[c] * updates[c][k]
        out.append((layer, role, acc))
    return ModelParams(out)


def client_update(client, w_t, cfg, dataset, spec, round, rng=None):
    """E epochs of minibatch SGD on the client's samples, then the (possibly attacked) upload.

    Returns ``(weights, loss)``.  With ``loss_statistic="uploaded"`` the loss
    is the client's mean training loss at the weights it uploads; with
    ``"final_epoch"`` it is the mean minibatch loss of the last local epoch.
    A diverging client uploads ``w_t`` unchanged and reports ``inf``.
    """
    if rng is None:
        rng = _rng.stream(cfg.master_seed, _rng.CLIENT, client.id, round)
    idx = np.asarray(client.sample_indices, dtype=np.int64)
    if idx.size == 0:
        raise DomainError(f"client {client.id} has no samples")
    images, labels = dataset.images, dataset.labels
    w = w_t
    try:
        for _ in range(cfg.local_epochs):
            order = idx[rng.permutation(idx.size)]
            batch_losses = []
            for start in range(0, order.size, cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                value, grads = loss_and_grad(spec, w, (images[b], labels[b]))
                batch_losses.append(value)
                w = sgd_step(w, grads, cfg.learning_rate)
        reported = float(np.mean(batch_losses))
    except NumericError as exc:
        logger.warning("client %d diverged in round %d: %s", client.id, round, exc)
        return w_t, math.inf

    w = inject(w, client.id, round, client.attack)
    if cfg.loss_statistic == "uploaded":
        try:
            reported = evaluate(spec, w, images[idx], labels[idx])[0]
        except NumericError:
            reported = math.inf
    return w, reported if math.isfinite(reported) else math.inf


def _thread_count(cfg):
    if cfg.threads is not None:
        return cfg.threads
    return int(os.environ.get(THREADS_ENV, "0") or 0)


def _emit(callback, event, **payload):
    if callback is not None:
        callback(event, payload)


def start_server(cfg, spec, selection=None):
    """Round-0 state: seeded ``w_0`` and the initial client selection ``s_1``."""
    cfg.validate()
    w0 = init_params(spec, _rng.stream(cfg.master_seed, _rng.INIT))
    if selection is None:
        selection = select_initial_clients(
            cfg.clients, cfg.fraction, _rng.stream(cfg.master_seed, _rng.SELECT, 1)
        )
    return ServerState(global_params=w0, initial_selection=frozenset(selection))


def run_round(server, clients, cfg, dataset, spec, test_set, callback=None):
    """Execute one communication round in place and return its RoundRecord."""
    t = server.round + 1
    _emit(callback, "round_started", round=t, mode=cfg.mode)
    if cfg.mode == "fedavg" and cfg.resample_each_round and t > 1:
        selection = select_initial_clients(
            cfg.clients, cfg.fraction, _rng.stream(cfg.master_seed, _rng.SELECT, t)
        )
    else:
        selection = server.initial_selection
    current = sorted(participants(t, selection, server.banned, cfg.mode))

    def work(c):
        return client_update(clients[c], server.global_params, cfg, dataset, spec, t)

    threads = _thread_count(cfg)
    if threads > 0 and len(current) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(current, pool.map(work, current)))
    else:
        results = {c: work(c) for c in current}
    for c in current:
        _emit(callback, "client_finished", round=t, client=c, loss=results[c][1])

    losses = {c: results[c][1] for c in current}
    sigma = cut = None
    flagged = set()
    if cfg.mode == "secure":
        scores, sigma = anomaly_scores(losses)
        cut = threshold(scores, cfg.threshold_rule)
        flagged = flag_anomalous(scores, cut, cfg.threshold_margin) - server.banned
        per_client = {
            c: ClientRound(losses[c], scores[c], c in flagged) for c in current
        }
    else:
        per_client = {c: ClientRound(losses[c]) for c in current}

    members = [c for c in current if not (cfg.strict_ban and c in flagged)]
    if not members:
        raise ProtocolError(f"round {t}: every participant was flagged")
    server.global_params = aggregate(
        {c: results[c][0] for c in members},
        {c: clients[c].n_samples for c in members},
    )
    server.banned |= flagged
    for c in sorted(flagged):
        _emit(callback, "client_banned", round=t, client=c, score=per_client[c].anomaly_score)

    g_loss, g_acc = evaluate(spec, server.global_params, test_set.images, test_set.labels)
    record = RoundRecord(
        round=t,
        mode=cfg.mode,
        participants=tuple(current),
        clients=per_client,
        sigma=sigma,
        threshold=cut,
        newly_banned=tuple(sorted(flagged)),
        global_loss=g_loss,
        global_accuracy=g_acc,
    )
    server.round = t
    server.history.append(record)
    return record


def make_clients(plan, attack=None):
    if attack is not None:
        attack.validate(len(plan))
    return {
        c: ClientState(c, tuple(plan[c]), attack if attack is not None and c in attack.targets else None)
        for c in sorted(plan)
    }


def run_experiment(cfg, dataset, plan, attack, spec, test_set, callback=None, server=None):
    """Run ``cfg.rounds`` rounds and return the list of RoundRecords."""
    cfg.validate()
    if len(plan) != cfg.clients:
        raise ConfigError(f"partition plan has {len(plan)} clients, config says {cfg.clients}")
    clients = make_clients(plan, attack)
    if server is None:
        server = start_server(cfg, spec)
    for _ in range(cfg.rounds):
        run_round(server, clients, cfg, dataset, spec, test_set, callback)
    return server.history


def with_mode(cfg, mode):
    return replace(cfg, mode=mode)
