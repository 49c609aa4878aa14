"""Datasets, target standardization and train/val/test splits."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chem import canonical_wl_hash, murcko_scaffold, parse_smiles
from .errors import EmptyDatasetError, HeaderError, SacaError
from .substructure import detect_keys

log = logging.getLogger(__name__)


@dataclass
class Record:
    smiles: str
    graph: object
    keys: object
    target: np.ndarray  # (task_dim,), NaN where unlabelled


@dataclass
class Dataset:
    records: list
    task_kind: str
    task_names: list
    skipped: int = 0
    skip_reasons: list = field(default_factory=list)

    @property
    def task_dim(self):
        return len(self.task_names)

    def __len__(self):
        return len(self.records)

    def targets(self, idx=None):
        recs = self.records if idx is None else [self.records[i] for i in idx]
        return np.array([r.target for r in recs], dtype=np.float64).reshape(len(recs), self.task_dim)


@dataclass
class Standardizer:
    """Per-task z-score transform; identity for classification tasks."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, y):
        y = np.asarray(y, dtype=np.float64)
        mean = np.nanmean(y, axis=0)
        std = np.nanstd(y, axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def _infer_kind(y):
    vals = y[~np.isnan(y)]
    return "binary" if vals.size and np.all((vals == 0) | (vals == 1)) else "regression"


def build_dataset(smiles, targets, vocab, task_names=None, task_kind=None, keep_largest=False):
    """Featurize ``smiles`` with their target rows; unparseable rows are skipped."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    task_names = list(task_names or [f"task{i}" for i in range(targets.shape[1])])
    records, reasons = [], []
    for row, (smi, y) in enumerate(zip(smiles, targets)):
        if np.all(np.isnan(y)):
            reasons.append((row, smi, "no labels"))
            continue
        try:
            g = parse_smiles(smi, keep_largest=keep_largest)
            kv = detect_keys(vocab, g)
        except SacaError as exc:
            reasons.append((row, smi, str(exc)))
            continue
        records.append(Record(smi, g, kv, y.copy()))
    for row, smi, why in reasons:
        log.info("skipping row %d (%r): %s", row, smi, why)
    if not records:
        raise EmptyDatasetError("no usable rows")
    kind = task_kind or _infer_kind(np.array([r.target for r in records]))
    return Dataset(records, kind, task_names, len(reasons), reasons)


def load_csv(path, vocab, task_kind=None, keep_largest=False):
    """Read ``smiles,<task...>`` CSV; empty cells become NaN."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise HeaderError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "smiles":
        raise HeaderError(f"{path}: header must be 'smiles,<task columns...>'")
    smiles, targets = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise HeaderError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        smiles.append(row[0].strip())
        y = []
        for cell in row[1:]:
            cell = cell.strip()
            try:
                y.append(float(cell) if cell else np.nan)
            except ValueError:
                raise HeaderError(f"{path}:{lineno}: non-numeric target {cell!r}") from None
        targets.append(y)
    if not smiles:
        raise EmptyDatasetError(f"{path}: no data rows")
    targets = np.array(targets, dtype=np.float64)
    for t, name in enumerate(header[1:]):
        if np.all(np.isnan(targets[:, t])):
            raise EmptyDatasetError(f"{path}: target column {name!r} is empty")
    return build_dataset(smiles, targets, vocab, header[1:], task_kind, keep_largest)


# ----------------------------------------------------------------------------
# Splits


@dataclass
class Split:
    train: list
    val: list
    test: list
    method: str
    seed: int

    def to_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test,
                "method": self.method, "seed": self.seed}


def _check_fractions(fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")


def random_split(n, fractions=(0.8, 0.1, 0.1), seed=0):
    _check_fractions(fractions)
    perm = np.random.default_rng(seed).permutation(n).tolist()
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return Split(sorted(perm[:n_train]), sorted(perm[n_train:n_train + n_val]),
                 sorted(perm[n_train + n_val:]), "random", seed)


def scaffold_key(g):
    return canonical_wl_hash(murcko_scaffold(g))


def scaffold_split(ds, fractions=(0.8, 0.1, 0.1), seed=0):
    """Place whole scaffold groups into single subsets.

    Groups are ordered by decreasing size, ties broken by a seed-salted hash
    of the scaffold digest, and each goes to the first subset still below
    its capacity.
    """
    _check_fractions(fractions)
    graphs = [r.graph for r in ds.records] if hasattr(ds, "records") else list(ds)
    groups = {}
    for i, g in enumerate(graphs):
        groups.setdefault(scaffold_key(g), []).append(i)

    def tiebreak(key):
        return hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).hexdigest()

    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), tiebreak(kv[0])))
    n = len(graphs)
    caps = [fractions[0] * n, fractions[1] * n, float("inf")]
    subsets = [[], [], []]
    for _, members in ordered:
        for s in range(3):
            if len(subsets[s]) < caps[s] - 1e-9:
                subsets[s].extend(members)
                break
    return Split(sorted(subsets[0]), sorted(subsets[1]), sorted(subsets[2]), "scaffold", seed)
