"""Experiment configuration, paired fedavg/secure runs and metrics export."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .attack import AttackSpec, FirstLayerNoise, RandomParams
from .data import Dataset, load_idx_images, load_idx_labels, load_mnist, partition, scheme_from_name, synthetic_dataset
from .exceptions import ConfigError, FormatError, ProtocolError
from .federation import FederationConfig, run_experiment, start_server
from .nn import MODEL_NAMES, build_spec, finite_diff_grad, init_params, loss_and_grad, max_relative_error

logger = logging.getLogger(__name__)

CSV_HEADER = ["mode", "round", "client_id", "loss", "anomaly_score", "banned", "global_loss", "global_accuracy"]
EXIT_OK, EXIT_CHECK_FAILED, EXIT_IO, EXIT_PROTOCOL = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
CONVERGENCE_TOLERANCE = 0.05


@dataclass
class DatasetConfig:
    source: str = "idx"
    dir: str = "data/mnist"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    n: int = 2000
    test_n: int = 500
    classes: int = 10
    seed: int = 0


@dataclass
class PartitionConfig:
    scheme: str = "iid"
    shards_per_client: int = 2
    min_shards: int = 1
    max_shards: int = 4


@dataclass
class AttackConfig:
    targets: list = field(default_factory=lambda: [1, 2])
    kind: str = "first_layer_noise"
    std: float = 1.0
    scale: float = 1.0
    seed: int = 0

    def to_spec(self):
        if self.kind == "first_layer_noise":
            kind = FirstLayerNoise(self.std)
        elif self.kind == "random_params":
            kind = RandomParams(self.scale)
        else:
            raise ConfigError(f"attack.kind: unknown attack {self.kind!r}")
        return AttackSpec(frozenset(self.targets), kind, self.seed)


@dataclass
class ExperimentConfig:
    clients: int = 10
    fraction: float = 1.0
    local_epochs: int = 10
    batch_size: int = 124
    learning_rate: float = 0.1
    rounds: int = 10
    mode: str = "secure"
    compare: bool = True
    threshold_rule: str = "median"
    threshold_margin: float = 1.0
    master_seed: int = 0
    loss_statistic: str = "uploaded"
    strict_ban: bool = False
    resample_each_round: bool = False
    model: str = "paper_cnn"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    attack: AttackConfig | None = None
    output_dir: str = "results"

    def federation(self, mode=None):
        return FederationConfig(
            clients=self.clients,
            fraction=self.fraction,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            rounds=self.rounds,
            mode=mode or self.mode,
            threshold_rule=self.threshold_rule,
            threshold_margin=self.threshold_margin,
            master_seed=self.master_seed,
            loss_statistic=self.loss_statistic,
            strict_ban=self.strict_ban,
            resample_each_round=self.resample_each_round and (mode or self.mode) == "fedavg",
        )

    @property
    def modes(self):
        return ("fedavg", "secure") if self.compare else (self.mode,)

    def validate(self):
        self.federation().validate()
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"model: must be one of {MODEL_NAMES}, got {self.model!r}")
        if self.dataset.source not in ("idx", "synthetic"):
            raise ConfigError(f"dataset.source: must be 'idx' or 'synthetic', got {self.dataset.source!r}")
        for key in ("train_limit", "test_limit"):
            value = getattr(self.dataset, key)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"dataset.{key}: must be a positive integer or null")
        if self.dataset.source == "synthetic":
            for key in ("n", "test_n", "classes"):
                if not isinstance(getattr(self.dataset, key), int) or getattr(self.dataset, key) < 1:
                    raise ConfigError(f"dataset.{key}: must be a positive integer")
            if self.dataset.n < self.dataset.classes:
                raise ConfigError("dataset.n: must be at least dataset.classes")
        scheme_from_name(
            self.partition.scheme, self.partition.shards_per_client,
            self.partition.min_shards, self.partition.max_shards,
        )
        if self.attack is not None:
            self.attack.to_spec().validate(self.clients)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {"dataset": DatasetConfig, "partition": PartitionConfig, "attack": AttackConfig}


def _build(cls, values, prefix=""):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in values.items():
        sub = _SECTIONS.get(key) if cls is ExperimentConfig else None
        if sub is not None and value is not None:
            value = _build(sub, value, prefix + key + ".")
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(text):
    """Parse and validate a JSON experiment config; missing keys take the defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    cfg = _build(ExperimentConfig, raw)
    try:
        return cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"invalid value type: {exc}") from exc


def load_config(path):
    with open(path) as f:
        return parse_config(f.read())


def load_datasets(cfg):
    """(train, test) datasets for a config."""
    d = cfg.dataset
    if d.source == "synthetic":
        full = synthetic_dataset(d.n + d.test_n, d.classes, _rng.stream(d.seed, _rng.SYNTHETIC))
        return full.subset(np.arange(d.n)), full.subset(np.arange(d.n, d.n + d.test_n))
    if d.train_images:
        train = Dataset(load_idx_images(d.train_images), load_idx_labels(d.train_labels)).head(d.train_limit)
        test = Dataset(load_idx_images(d.test_images), load_idx_labels(d.test_labels)).head(d.test_limit)
        return train, test
    return load_mnist(d.dir, "train", d.train_limit), load_mnist(d.dir, "test", d.test_limit)


def model_spec(cfg, train):
    return build_spec(cfg.model, image_size=train.images.shape[-1], n_classes=train.n_classes)


def make_plan(cfg, train):
    p = cfg.partition
    scheme = scheme_from_name(p.scheme, p.shards_per_client, p.min_shards, p.max_shards)
    return partition(train, scheme, cfg.clients, _rng.stream(cfg.master_seed, _rng.PARTITION))


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def metrics_rows(history):
    for rec in history:
        for c in sorted(rec.clients):
            cr = rec.clients[c]
            yield [rec.mode, rec.round, c, cr.loss, cr.anomaly_score, cr.banned_now, None, None]
        yield [rec.mode, rec.round, "global", rec.global_loss, None, None, rec.global_loss, rec.global_accuracy]


def metrics_csv(histories):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for history in histories:
        for row in metrics_rows(history):
            writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def convergence_round(losses, tolerance=CONVERGENCE_TOLERANCE):
    """First round (1-based) whose loss is within ``tolerance`` of the final loss."""
    if not losses:
        return None
    final = losses[-1]
    return next(i + 1 for i, v in enumerate(losses) if abs(v - final) <= tolerance * abs(final))


def first_round_reaching(losses, target):
    """First round (1-based) with loss <= target, or None."""
    return next((i + 1 for i, v in enumerate(losses) if v <= target), None)


def summarize(history):
    if not history:
        return {"rounds": 0, "banned": []}
    losses = [r.global_loss for r in history]
    accs = [r.global_accuracy for r in history]
    best = int(np.argmax(accs))
    banned = sorted({c for r in history for c in r.newly_banned})
    return {
        "rounds": len(history),
        "final_accuracy": accs[-1],
        "best_accuracy": accs[best],
        "best_round": best + 1,
        "final_loss": losses[-1],
        "convergence_round": convergence_round(losses),
        "banned": banned,
        "global_loss": losses,
        "global_accuracy": accs,
    }


def _digest(obj):
    return hashlib.sha256(obj).hexdigest()


def plan_checksum(plan):
    payload = json.dumps({str(c): list(map(int, v)) for c, v in sorted(plan.items())}, sort_keys=True)
    return _digest(payload.encode())


def run_experiments(cfg, callback=None):
    """Run every requested mode on the same data, plan and initial weights.

    Returns ``(histories, summary)``.
    """
    train, test = load_datasets(cfg)
    spec = model_spec(cfg, train)
    plan = make_plan(cfg, train)
    attack = cfg.attack.to_spec() if cfg.attack is not None else None
    histories, runs = [], {}
    w0 = None
    for mode in cfg.modes:
        fcfg = cfg.federation(mode)
        server = start_server(fcfg, spec)
        w0 = server.global_params
        history = run_experiment(fcfg, train, plan, attack, spec, test, callback, server=server)
        histories.append(history)
        runs[mode] = summarize(history)
    summary = {
        "config": cfg.to_dict(),
        "seeds": {
            "master_seed": cfg.master_seed,
            "attack_seed": cfg.attack.seed if cfg.attack is not None else None,
            "dataset_seed": cfg.dataset.seed if cfg.dataset.source == "synthetic" else None,
        },
        "checksums": {
            "partition_plan": plan_checksum(plan),
            "initial_params": _digest(w0.to_bytes()) if w0 is not None else None,
        },
        "client_sizes": {str(c): len(v) for c, v in sorted(plan.items())},
        "runs": runs,
    }
    return histories, summary


def _json_default(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def run(cfg, out_dir=None, callback=None):
    """Run the configured experiment and write ``metrics.csv`` and ``summary.json``; returns an exit code."""
    out_dir = out_dir or cfg.output_dir
    try:
        histories, summary = run_experiments(cfg, callback)
    except ProtocolError as exc:
        logger.error("protocol error: %s", exc)
        return EXIT_PROTOCOL
    except (OSError, FormatError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            f.write(metrics_csv(histories))
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


def gradcheck(spec_name, seed=0, batch_size=4, epsilon=1e-5, grad_fn=loss_and_grad, out=print):
    """Compare analytic and central-difference gradients on a reduced 8x8 variant.

    Returns ``(exit_code, max_relative_error)``.
    """
    spec = build_spec(spec_name, reduced=True)
    rng = _rng.stream(seed, _rng.GRADCHECK)
    params = init_params(spec, rng)
    # non-zero biases so the bias gradients are exercised away from the init point
    params = params.map(lambda a: a + rng.normal(0.0, 0.1, size=a.shape))
    inputs = rng.uniform(0.0, 1.0, size=(batch_size,) + spec.input_shape)
    labels = rng.integers(0, spec.n_classes, size=batch_size)
    analytic = grad_fn(spec, params, (inputs, labels))[1]
    numeric = finite_diff_grad(spec, params, (inputs, labels), epsilon)
    err = max_relative_error(analytic, numeric)
    ok = err <= GRADCHECK_TOLERANCE
    out(f"{spec_name} seed={seed} max_rel_error={err:.3e} {'OK' if ok else 'FAIL'}")
    return (EXIT_OK if ok else EXIT_CHECK_FAILED), err


def partition_stats(cfg, out=print):
    """Print ``client n_c distinct_labels`` per client; returns the rows."""
    train, _ = load_datasets(cfg)
    plan = make_plan(cfg, train)
    rows = []
    for c in sorted(plan):
        idx = np.asarray(plan[c], dtype=np.int64)
        row = (c, len(idx), int(np.unique(train.labels[idx]).size))
        rows.append(row)
        out(f"client={row[0]} n_c={row[1]} distinct_labels={row[2]}")
    return rows
