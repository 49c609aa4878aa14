"""Expressiveness, attention export and complexity measurements."""

from __future__ import annotations

import csv
import time
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .chem import canonical_wl_hash, parse_smiles
from .corpus import chain_with_rings, random_molecules
from .errors import NoCollisionPairFound
from .model import MolBatch, SacaConfig, SacaModel
from .substructure import default_vocabulary, detect_keys

DECALIN = "C1CCC2CCCCC2C1"
BICYCLOPENTYL = "C1CCC(C1)C1CCCC1"


# ----------------------------------------------------------------------------
# 1-WL color refinement


@dataclass
class ColorRefinementResult:
    distinguishable: bool
    histograms: list        # per iteration: (Counter for g1, Counter for g2)
    stable_iteration: int
    partition: list         # final color per vertex of the disjoint union

    @property
    def verdict(self):
        return "distinguishable" if self.distinguishable else "indistinguishable"


def _initial_labels(g, init_labels):
    if init_labels is None or init_labels == "uniform":
        return [0] * g.num_atoms
    if init_labels == "element":
        return [(a.atomic_num, a.is_aromatic) for a in g.atoms]
    if callable(init_labels):
        return [init_labels(a) for a in g.atoms]
    raise ValueError(f"unknown init_labels {init_labels!r}")


def wl_refine(g1, g2, init_labels="uniform"):
    """Run 1-WL on the disjoint union of ``g1`` and ``g2`` until the partition is stable.

    Colors are compressed to integers after each round, using a shared
    table, so colors mean the same thing in both graphs.
    """
    n1 = g1.num_atoms
    adj = [list(g1.neighbors(i)) for i in range(n1)]
    adj += [[j + n1 for j in g2.neighbors(i)] for i in range(g2.num_atoms)]
    raw = _initial_labels(g1, init_labels) + _initial_labels(g2, init_labels)
    table = {lab: k for k, lab in enumerate(sorted(set(raw), key=repr))}
    colors = [table[lab] for lab in raw]

    def hist(cs):
        return Counter(cs[:n1]), Counter(cs[n1:])

    histograms = [hist(colors)]
    distinguishable = histograms[0][0] != histograms[0][1]
    stable = 0
    for it in range(1, len(colors) + 1):
        sigs = [(colors[v], tuple(sorted(colors[w] for w in adj[v]))) for v in range(len(colors))]
        table = {s: k for k, s in enumerate(sorted(set(sigs)))}
        new = [table[s] for s in sigs]
        histograms.append(hist(new))
        if histograms[-1][0] != histograms[-1][1]:
            distinguishable = True
        if len(set(new)) == len(set(colors)):
            colors = new
            stable = it - 1
            break
        colors = new
    return ColorRefinementResult(distinguishable, histograms, stable, colors)


# ----------------------------------------------------------------------------
# Expressiveness demo


def gin_pooled_embedding(graphs, seed=0, d=16, layers=3):
    """Sum-pooled GIN embeddings with every atom given the same input vector."""
    config = SacaConfig(d=d, h=2, N=layers + 1, M=1, d_ffn=d, dropout=0.0, gnn_kind="GIN")
    model = SacaModel(config, seed=seed)
    batch = MolBatch.build(graphs, [detect_keys(default_vocabulary(), graphs[0])] * len(graphs),
                           config.vocab_size)
    rng = np.random.default_rng([seed, 11])
    # uniform atoms and bonds: every node and every edge gets the same vector
    h0 = T.Tensor(np.tile(rng.normal(size=(1, d)), (batch.total_nodes, 1)))
    for t in model.edge_tables:
        t.data[:] = t.data[0]
    with T.no_grad():
        h = model.node_representations(batch, h0)[-1].data
    pooled = np.zeros((len(graphs), d))
    np.add.at(pooled, batch.graph_of_node, h)
    return pooled


def model_distance(model, g1, g2, vocab):
    out = model.predict([g1, g2], [detect_keys(vocab, g1), detect_keys(vocab, g2)])
    return float(np.max(np.abs(out[0] - out[1])))


def find_key_collision(corpus, vocab):
    """First pair of non-isomorphic molecules with identical key bits."""
    seen = {}
    for smi, g in corpus:
        bits = tuple(detect_keys(vocab, g).bits)
        h = canonical_wl_hash(g)
        if bits in seen and seen[bits][2] != h:
            return seen[bits][:2], (smi, g)
        seen.setdefault(bits, (smi, g, h))
    raise NoCollisionPairFound("no two distinct molecules share a key vector")


def expressiveness_demo(seed=0, config=None, corpus=None, vocab=None):
    """Report for the two classic failure modes: WL-equivalent graphs and key collisions."""
    vocab = vocab or default_vocabulary()
    config = config or SacaConfig(d=16, h=2, N=2, M=1, d_ffn=16, dropout=0.0,
                                  vocab_size=len(vocab.patterns))
    g1, g2 = parse_smiles(DECALIN), parse_smiles(BICYCLOPENTYL)
    wl = wl_refine(g1, g2, "uniform")
    gin = gin_pooled_embedding([g1, g2], seed=seed)
    full = SacaModel(config, seed=seed)
    report = {
        "wl_pair": [DECALIN, BICYCLOPENTYL],
        "wl_verdict": wl.verdict,
        "wl_stable_iteration": wl.stable_iteration,
        "gin_distance": float(np.max(np.abs(gin[0] - gin[1]))),
        "saca_distance": model_distance(full, g1, g2, vocab),
    }
    if corpus is None:
        corpus = random_molecules(200, seed=seed, max_atoms=14)
    try:
        (s1, h1), (s2, h2) = find_key_collision(corpus, vocab)
    except NoCollisionPairFound as exc:
        report["collision"] = {"error": str(exc)}
        return report
    sub_only = SacaModel(SacaConfig(**{**config.to_dict(), "variant": "no_gnn"}), seed=seed)
    report["collision"] = {
        "pair": [s1, s2],
        "keys": [vocab.names[i] for i in detect_keys(vocab, h1).present_indices],
        "substructure_only_distance": model_distance(sub_only, h1, h2, vocab),
        "saca_distance": model_distance(full, h1, h2, vocab),
    }
    return report


# ----------------------------------------------------------------------------
# Attention export


def export_attention(model, g, vocab, smiles=None):
    """JSON-ready attention maps of one molecule.

    Each cross-attention layer is an ``h x m x n`` list (queries are CLS plus
    present keys, columns are atoms); each self-attention layer is ``h x t x t``.
    """
    kv = detect_keys(vocab, g)
    batch = MolBatch.build([g], [kv], model.config.vocab_size)
    with T.no_grad():
        out = model.forward(batch)
    rows = ["CLS"] + [vocab.names[i] for i in kv.present_indices]
    atoms = [f"{i}:{a.symbol}" for i, a in enumerate(g.atoms)]
    variant = model.config.variant
    if variant == "begin_concat":
        self_labels = rows + atoms
    elif variant == "end_concat":
        self_labels = ["CLS"] + atoms
    else:
        self_labels = rows
    return {
        "smiles": smiles,
        "variant": variant,
        "row_labels": rows,
        "col_labels": atoms,
        "self_labels": self_labels,
        "cross_attention": [a[0].tolist() for a in out.cross_attention],
        "self_attention": [a[0].tolist() for a in out.self_attention],
        "prediction": out.prediction.data[0].tolist(),
    }


# ----------------------------------------------------------------------------
# Complexity


def saca_entries(n, m, h, layers):
    """Cross-attention weights stored: ``(1 + m) * n * h`` per fusing layer."""
    return layers * h * (1 + m) * n


def node_transformer_entries(n, h, layers):
    return layers * h * n * n


def model_attention_entries(config, n, m):
    """Closed-form count of every attention weight the model stores for one molecule."""
    c = config
    t = 1 + m
    if c.variant in ("full", "random_embedding"):
        return c.N * c.h * t * n + (c.N + c.M) * c.h * t * t
    if c.variant == "no_gnn":
        return (2 * c.N + c.M) * c.h * t * t
    width = t + n if c.variant == "begin_concat" else 1 + n
    return (2 * c.N + c.M) * c.h * width * width


def all_pairs_shortest_paths(g):
    """BFS from every atom; returns the dense hop-distance matrix (-1 if unreachable)."""
    n = g.num_atoms
    dist = np.full((n, n), -1, dtype=np.int64)
    adj = [g.neighbors(i) for i in range(n)]
    for s in range(n):
        row = dist[s]
        row[s] = 0
        q = deque([s])
        while q:
            v = q.popleft()
            for w in adj[v]:
                if row[w] < 0:
                    row[w] = row[v] + 1
                    q.append(w)
    return dist


@dataclass
class BenchRecord:
    n_atoms: int
    key_detect_us: float
    apsp_us: float
    saca_entries: int
    node_tf_entries: int

    FIELDS = ("n_atoms", "key_detect_us", "apsp_us", "saca_entries", "node_tf_entries")


def _median_time(fn, trials):
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e6


def bench_preprocessing(sizes, trials=3, vocab=None, h=4, layers=3):
    """Time key detection and APSP on ring-studded chains of each size."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be sorted ascending")
    vocab = vocab or default_vocabulary()
    records = []
    for n in sizes:
        g = chain_with_rings(n)
        m = len(detect_keys(vocab, g).present_indices)
        records.append(BenchRecord(
            n_atoms=n,
            key_detect_us=_median_time(lambda: detect_keys(vocab, g), trials),
            apsp_us=_median_time(lambda: all_pairs_shortest_paths(g), trials),
            saca_entries=saca_entries(n, m, h, layers),
            node_tf_entries=node_transformer_entries(n, h, layers),
        ))
    return records


def write_bench_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BenchRecord.FIELDS)
        for r in records:
            w.writerow([r.n_atoms, f"{r.key_detect_us:.3f}", f"{r.apsp_us:.3f}",
                        r.saca_entries, r.node_tf_entries])


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def r_squared(x, y, degree):
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid ** 2) / ss_tot), coef


# ----------------------------------------------------------------------------
# Full-model gradient check


def model_grad_check(seed=7, smiles="CC(=O)NCO", config=None, eps=1e-6, jitter=0.3, vocab=None):
    """Max relative gradient error of the full model on one molecule.

    Parameters are moved off their small-scale initialization by Gaussian
    jitter first: near init the attention score gradients are tiny and the
    finite-difference roundoff dominates the comparison.
    """
    vocab = vocab or default_vocabulary()
    config = config or SacaConfig(d=8, h=2, N=2, M=1, d_ffn=8, dropout=0.0,
                                  vocab_size=len(vocab.patterns))
    model = SacaModel(config, seed=seed)
    rng = np.random.default_rng([seed, 3])
    for p in model.parameters():
        p.data = p.data + jitter * rng.normal(size=p.shape)
    g = parse_smiles(smiles)
    batch = MolBatch.build([g], [detect_keys(vocab, g)], config.vocab_size)
    target = np.ones((1, config.task_dim))

    def loss():
        return T.mse_loss(model.forward(batch).prediction, target)

    return T.grad_check(loss, model.parameters(), eps=eps, return_all=True)
