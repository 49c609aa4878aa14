"""Training loop, AdamW, descriptor pretraining and random hyperparameter search."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Standardizer, build_dataset, random_split
from .descriptors import DESCRIPTOR_NAMES, compute_descriptors
from .errors import ConfigError, NonFiniteError, SingleClassError
from .metrics import roc_auc, rmse
from .model import MolBatch


@dataclass
class HyperParams:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1
    shuffle: bool = True
    log_path: str | None = None
    checkpoint_path: str | None = None
    log_wall_time: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ConfigError("batch_size and threads must be >= 1, epochs >= 0")
        self.betas = tuple(self.betas)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**doc)


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, params, lr=1e-4, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainRun:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")
    test_metric: float = float("nan")
    train_metric: float = float("nan")
    metric_name: str = ""
    standardizer: Standardizer | None = None
    best_state: dict | None = None

    def summary(self):
        return {"best_epoch": self.best_epoch, "best_val": _num(self.best_val),
                "test_metric": _num(self.test_metric), "train_metric": _num(self.train_metric),
                "metric": self.metric_name}


def _num(x):
    """NaN becomes None so logs stay strict JSON."""
    return None if isinstance(x, float) and math.isnan(x) else x


# ----------------------------------------------------------------------------
# Loss and evaluation


def _loss(pred, y, kind):
    if kind == "binary":
        return T.bce_with_logits_loss(pred, y)
    mask = ~np.isnan(y)
    return T.mse_loss(pred, np.where(mask, y, 0.0), mask)


def _batches(idx, size, rng):
    idx = list(idx)
    if rng is not None:
        idx = [idx[i] for i in rng.permutation(len(idx))]
    return [idx[i:i + size] for i in range(0, len(idx), size)]


def predict_dataset(model, ds, idx, batch_size=64):
    """Raw model outputs (standardized scale for regression) for ``idx``."""
    outs = []
    with T.no_grad():
        for chunk in _batches(idx, batch_size, None):
            recs = [ds.records[i] for i in chunk]
            batch = MolBatch.build([r.graph for r in recs], [r.keys for r in recs], model.config.vocab_size)
            outs.append(model.forward(batch).prediction.data.astype(np.float64))
    if not outs:
        return np.zeros((0, model.config.task_dim))
    return np.concatenate(outs, axis=0)


def evaluate(model, ds, idx, standardizer=None):
    """Metric on ``idx``: RMSE in original units for regression, ROC-AUC for binary."""
    if not idx:
        return float("nan")
    pred = predict_dataset(model, ds, idx)
    y = ds.targets(idx)
    if ds.task_kind == "binary":
        try:
            return roc_auc(pred, y)
        except SingleClassError:
            return float("nan")
    if standardizer is not None:
        pred = standardizer.inverse(pred)
    return rmse(pred, y)


def _better(kind, new, best):
    if math.isnan(new):
        return False
    if math.isnan(best):
        return True
    return new > best if kind == "binary" else new < best


# ----------------------------------------------------------------------------
# Gradient evaluation


def _chunk_grads(model, graphs, keys, y, kind, rng, weight):
    params = model.parameters()
    batch = MolBatch.build(graphs, keys, model.config.vocab_size)
    with T.Tape() as tape:
        out = model.forward(batch, train=True, rng=rng)
        loss = _loss(out.prediction, y.astype(model.dtype), kind)
    grads = tape.backward(loss, accumulate=False)
    return float(loss.item()) * weight, [None if id(p) not in grads else grads[id(p)] * weight for p in params]


def batch_gradients(model, ds, chunk_idx, y_all, kind, seed_parts, threads, pool=None):
    """Loss and gradients for one mini-batch, split into ``threads`` chunks.

    Each chunk gets its own tape; chunk gradients are weighted by their
    share of labelled entries and summed in chunk order, so the result
    does not depend on thread scheduling.
    """
    pieces = np.array_split(np.arange(len(chunk_idx)), min(threads, len(chunk_idx)))
    labelled = np.sum(~np.isnan(y_all))
    jobs = []
    for c, piece in enumerate(pieces):
        recs = [ds.records[chunk_idx[i]] for i in piece]
        y = y_all[piece]
        weight = float(np.sum(~np.isnan(y)) / labelled) if labelled else 0.0
        rng = np.random.default_rng([*seed_parts, c])
        jobs.append(([r.graph for r in recs], [r.keys for r in recs], y, kind, rng, weight))
    if pool is None or len(jobs) == 1:
        results = [_chunk_grads(model, *j) for j in jobs]
    else:
        results = list(pool.map(lambda j: _chunk_grads(model, *j), jobs))
    total_loss = 0.0
    grads = [None] * len(model.parameters())
    for loss, gs in results:
        total_loss += loss
        for k, g in enumerate(gs):
            if g is not None:
                grads[k] = g if grads[k] is None else grads[k] + g
    return total_loss, grads


# ----------------------------------------------------------------------------
# Training


def train(model, ds, split, hp=None, standardizer=None, progress=None):
    """Mini-batch training with best-validation checkpoint selection.

    Regression targets are z-scored with train-split statistics unless a
    ``standardizer`` is given.  The model ends holding the best-validation
    parameters.
    """
    hp = hp or HyperParams()
    if model.config.task_dim != ds.task_dim:
        raise ConfigError(f"model head has {model.config.task_dim} outputs, dataset has {ds.task_dim} tasks")
    if not split.train:
        raise ConfigError("empty training split")
    kind = ds.task_kind
    if standardizer is None:
        if kind == "binary":
            standardizer = Standardizer.identity(ds.task_dim)
        else:
            standardizer = Standardizer.fit(ds.targets(split.train))
    y_all = standardizer.transform(ds.targets()) if kind != "binary" else ds.targets()
    run = TrainRun(metric_name="roc_auc" if kind == "binary" else "rmse", standardizer=standardizer)
    opt = AdamW(model.parameters(), hp.lr, hp.weight_decay, hp.betas, hp.eps)
    order_rng = np.random.default_rng([hp.seed, 1])
    log_fh = open(hp.log_path, "w") if hp.log_path else None
    pool = ThreadPoolExecutor(hp.threads) if hp.threads > 1 else None
    val_idx = split.val or split.train
    step = 0
    try:
        for epoch in range(hp.epochs):
            t0 = time.perf_counter()
            losses, weights = [], []
            for chunk in _batches(split.train, hp.batch_size, order_rng if hp.shuffle else None):
                y = y_all[chunk]
                try:
                    loss, grads = batch_gradients(model, ds, chunk, y, kind, (hp.seed, epoch, step),
                                                  hp.threads, pool)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"non-finite value at step {step}: {exc}", step) from exc
                for p, g in zip(model.parameters(), grads):
                    p.grad = g
                opt.step()
                model.zero_grad()
                if not all(np.isfinite(p.data).all() for p in model.parameters()):
                    raise NonFiniteError(f"non-finite parameters after step {step}", step)
                losses.append(loss)
                weights.append(len(chunk))
                step += 1
            train_loss = float(np.average(losses, weights=weights))
            val = evaluate(model, ds, val_idx, standardizer)
            entry = {"epoch": epoch, "train_loss": train_loss, "val_metric": _num(val)}
            if hp.log_wall_time:
                entry["wall_time"] = time.perf_counter() - t0
            run.history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
            if _better(kind, val, run.best_val) or run.best_state is None:
                run.best_val, run.best_epoch = val, epoch
                run.best_state = model.state_dict()
                if hp.checkpoint_path:
                    model.save(hp.checkpoint_path, meta={"task_kind": kind, "epoch": epoch,
                                                         "standardizer": standardizer.to_dict()})
    finally:
        if log_fh:
            log_fh.close()
        if pool:
            pool.shutdown()
    if run.best_state is not None:
        model.load_state_dict(run.best_state)
    run.train_metric = evaluate(model, ds, split.train, standardizer)
    run.test_metric = evaluate(model, ds, split.test, standardizer)
    return run


def descriptor_dataset(smiles, vocab):
    """Dataset whose 16 targets are the graph descriptors of each molecule."""
    from .chem import parse_smiles

    good, targets = [], []
    for s in smiles:
        try:
            targets.append(compute_descriptors(parse_smiles(s)))
            good.append(s)
        except ValueError:
            continue
    return build_dataset(good, np.array(targets), vocab, list(DESCRIPTOR_NAMES), "regression")


def pretrain_descriptors(model, smiles, vocab, hp=None, val_fraction=0.1):
    """Multi-target regression on z-scored descriptors.

    The head is resized to 16 outputs if needed; afterwards
    :meth:`SacaModel.replace_head` swaps in a task head over the same trunk.
    """
    ds = descriptor_dataset(smiles, vocab)
    if model.config.task_dim != len(DESCRIPTOR_NAMES):
        model.replace_head(len(DESCRIPTOR_NAMES), seed=(hp.seed if hp else 0))
    seed = hp.seed if hp else 0
    split = random_split(len(ds), (1.0 - val_fraction, val_fraction, 0.0), seed)
    return train(model, ds, split, hp)


# ----------------------------------------------------------------------------
# Random search

WEIGHT_DECAYS = (0.0, 1e-3, 1e-4, 1e-5)
HEAD_LAYERS = (1, 2, 3)


@dataclass
class SearchSpace:
    lr: tuple = (1e-6, 1e-3)
    dropout: tuple = (0.0, 0.5)
    weight_decay: tuple = WEIGHT_DECAYS
    head_layers: tuple = HEAD_LAYERS

    def sample(self, rng):
        lo, hi = np.log(self.lr[0]), np.log(self.lr[1])
        return {
            "lr": float(np.exp(rng.uniform(lo, hi))),
            "dropout": float(rng.uniform(*self.dropout)),
            "weight_decay": float(self.weight_decay[rng.integers(len(self.weight_decay))]),
            "head_layers": int(self.head_layers[rng.integers(len(self.head_layers))]),
        }


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list

    def to_dict(self):
        return asdict(self)


def random_search(space=None, budget=1, seed=0, objective=None, maximize=True):
    """Sample ``budget`` points and keep the one with the best ``objective``.

    Without an objective every trial scores NaN and the first sample wins.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    trials = []
    best, best_score = None, float("nan")
    for _ in range(budget):
        point = space.sample(rng)
        score = float(objective(point)) if objective else float("nan")
        trials.append({"params": point, "score": score})
        if best is None:
            best, best_score = point, score
        elif not math.isnan(score) and (math.isnan(best_score)
                                        or (score > best_score if maximize else score < best_score)):
            best, best_score = point, score
    return SearchResult(best, best_score, trials)


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
