"""The two-branch network: substructure Transformer fused with a GNN.

Substructure tokens (plus a CLS token) pass through ``N`` rounds of
self-attention followed by a fusing block whose cross-attention queries the
node representations of the matching GNN depth (0-hop for the first round,
1-hop for the second, ...).  ``M`` trailing self-attention blocks refine the
tokens and an MLP head reads the CLS row.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .chem import ATOM_FEATURE_DIMS, BOND_FEATURE_DIMS
from .errors import ConfigError
from .layers import BlockParams, param, transformer_block, xavier

GNN_KINDS = ("GIN", "GCN", "GAT")
VARIANTS = ("full", "no_gnn", "begin_concat", "end_concat", "random_embedding")
NODE_ROWS = sum(ATOM_FEATURE_DIMS)
EDGE_ROWS = sum(BOND_FEATURE_DIMS)


@dataclass(frozen=True)
class SacaConfig:
    d: int = 64
    h: int = 4
    N: int = 3
    M: int = 4
    d_ffn: int = 64
    dropout: float = 0.1
    gnn_kind: str = "GIN"
    variant: str = "full"
    vocab_size: int = 32
    task_dim: int = 1
    head_layers: int = 2
    pre_ln: bool = False

    def __post_init__(self):
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise ConfigError(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.M < 0:
            raise ConfigError("M must be >= 0")
        if self.d_ffn < 1:
            raise ConfigError("d_ffn must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.gnn_kind not in GNN_KINDS:
            raise ConfigError(f"gnn_kind must be one of {GNN_KINDS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.vocab_size < 1 or self.task_dim < 1:
            raise ConfigError("vocab_size and task_dim must be >= 1")
        if self.head_layers not in (1, 2, 3):
            raise ConfigError("head_layers must be 1, 2 or 3")
        if self.variant != "full" and self.variant != "random_embedding" and self.gnn_kind != "GIN":
            raise ConfigError(f"variant {self.variant} has no GNN branch; gnn_kind must stay GIN")

    @property
    def uses_gnn(self):
        return self.variant in ("full", "random_embedding")

    @property
    def uses_atoms(self):
        return self.variant != "no_gnn"

    @classmethod
    def from_dict(cls, doc):
        known = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# Batching


@dataclass
class MolBatch:
    node_feat: np.ndarray      # (total_n, 9)
    edge_src: np.ndarray       # (2E,) directed edges
    edge_dst: np.ndarray
    edge_feat: np.ndarray      # (2E, 3)
    node_pad: np.ndarray       # (B, n_max) row index into nodes, total_n = pad
    node_valid: np.ndarray     # (B, n_max) bool
    token_ids: np.ndarray      # (B, t_max) 0 = CLS, 1 + k = key k, pad = vocab + 1
    slot_ids: np.ndarray       # (B, t_max) 0 = CLS, 1 + j = j-th present key
    token_valid: np.ndarray    # (B, t_max)
    num_nodes: np.ndarray      # (B,)
    num_keys: np.ndarray       # (B,)
    graph_of_node: np.ndarray  # (total_n,)

    @property
    def size(self):
        return len(self.num_nodes)

    @property
    def total_nodes(self):
        return len(self.node_feat)

    @classmethod
    def build(cls, graphs, keys, vocab_size):
        feats, src, dst, efeat, owner = [], [], [], [], []
        offset = 0
        for b, g in enumerate(graphs):
            feats.extend(a.encode() for a in g.atoms)
            for bond in g.bonds:
                code = bond.encode()
                src += [bond.begin + offset, bond.end + offset]
                dst += [bond.end + offset, bond.begin + offset]
                efeat += [code, code]
            owner += [b] * g.num_atoms
            offset += g.num_atoms
        B = len(graphs)
        counts = np.array([g.num_atoms for g in graphs], dtype=np.int64)
        n_max = max(int(counts.max()) if B else 0, 1)
        node_pad = np.full((B, n_max), offset, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if B else np.zeros(0, np.int64)
        for b in range(B):
            node_pad[b, :counts[b]] = starts[b] + np.arange(counts[b])
        node_valid = np.arange(n_max)[None, :] < counts[:, None]
        for kv in keys:
            if len(kv.bits) != vocab_size:
                raise ValueError(f"key vector length {len(kv.bits)} != vocab size {vocab_size}")
        nkeys = np.array([len(kv.present_indices) for kv in keys], dtype=np.int64)
        t_max = 1 + (int(nkeys.max()) if B else 0)
        token_ids = np.full((B, t_max), vocab_size + 1, dtype=np.int64)
        slot_ids = np.full((B, t_max), vocab_size + 1, dtype=np.int64)
        for b, kv in enumerate(keys):
            token_ids[b, 0] = 0
            slot_ids[b, 0] = 0
            token_ids[b, 1:1 + nkeys[b]] = 1 + np.asarray(kv.present_indices, dtype=np.int64)
            slot_ids[b, 1:1 + nkeys[b]] = 1 + np.arange(nkeys[b])
        token_valid = np.arange(t_max)[None, :] < (1 + nkeys)[:, None]
        return cls(
            node_feat=np.array(feats, dtype=np.int64).reshape(-1, len(ATOM_FEATURE_DIMS)),
            edge_src=np.array(src, dtype=np.int64),
            edge_dst=np.array(dst, dtype=np.int64),
            edge_feat=np.array(efeat, dtype=np.int64).reshape(-1, len(BOND_FEATURE_DIMS)),
            node_pad=node_pad, node_valid=node_valid,
            token_ids=token_ids, slot_ids=slot_ids, token_valid=token_valid,
            num_nodes=counts, num_keys=nkeys, graph_of_node=np.array(owner, dtype=np.int64),
        )


@dataclass
class ModelOutput:
    prediction: T.Tensor            # (B, task_dim)
    cls: T.Tensor                   # (B, d)
    cross_attention: list           # per fusing block, arrays (B, h, m, n)
    self_attention: list            # per self block, arrays (B, h, t, t)
    node_reps: list                 # GNN layer outputs, (total_n, d) each

    @property
    def attention_entries(self):
        """Stored attention weights per molecule, padding excluded (batch of one)."""
        return sum(int(a[0].size) for a in self.cross_attention + self.self_attention)


# ----------------------------------------------------------------------------
# GNN layers


def _zero_row(like):
    return T.Tensor(np.zeros((1, like.shape[1]), dtype=like.dtype))


def gin_layer(h, batch, e, p):
    """``MLP((1 + eps) h_i + sum_j relu(h_j + e_ij))`` with the MLP ``d -> d -> d``."""
    msg = T.relu(T.add(T.gather_rows(h, batch.edge_src), e))
    agg = T.scatter_add_rows(msg, batch.edge_dst, batch.total_nodes)
    pre = T.add(T.mul(T.add(p["eps"], 1.0), h), agg)
    hidden = T.relu(T.add(T.matmul(pre, p["W1"]), p["b1"]))
    return T.add(T.matmul(hidden, p["W2"]), p["b2"])


def gcn_layer(h, batch, e, p):
    """Symmetric-normalized aggregation with self loops, edge embeddings added to messages."""
    deg = np.bincount(batch.edge_dst, minlength=batch.total_nodes).astype(h.dtype) + 1.0
    coef = 1.0 / np.sqrt(deg[batch.edge_src] * deg[batch.edge_dst])
    msg = T.mul(T.add(T.gather_rows(h, batch.edge_src), e), coef[:, None])
    agg = T.add(T.scatter_add_rows(msg, batch.edge_dst, batch.total_nodes), T.mul(h, (1.0 / deg)[:, None]))
    return T.relu(T.add(T.matmul(agg, p["W"]), p["b"]))


def _neighbor_table(batch):
    """Per node: self first, then neighbors; padded with -1. Returns (nbr, edge) index arrays."""
    n = batch.total_nodes
    lists = [[(i, -1)] for i in range(n)]
    for k, (s, t) in enumerate(zip(batch.edge_src, batch.edge_dst)):
        lists[t].append((int(s), k))
    width = max((len(x) for x in lists), default=1)
    nbr = np.full((n, width), -1, dtype=np.int64)
    edge = np.full((n, width), -1, dtype=np.int64)
    for i, row in enumerate(lists):
        for c, (j, k) in enumerate(row):
            nbr[i, c] = j
            edge[i, c] = k
    return nbr, edge


def gat_layer(h, batch, e, p):
    """Single-head additive attention over neighbors and self."""
    n, d = h.shape
    nbr, edge = _neighbor_table(batch)
    valid = nbr >= 0
    z = T.matmul(h, p["W"])
    z_pad = T.concat([z, _zero_row(z)], axis=0)
    e_pad = T.concat([e, _zero_row(z)], axis=0)
    msg = T.add(T.gather_rows(z_pad, np.where(valid, nbr, n)),
                T.gather_rows(e_pad, np.where(edge >= 0, edge, e.shape[0])))  # (n, k, d)
    k = nbr.shape[1]
    s_src = T.reshape(T.matmul(msg, p["a_src"]), (n, k))
    s_dst = T.matmul(z, p["a_dst"])  # (n, 1)
    scores = T.leaky_relu(T.add(s_src, s_dst))
    alpha = T.softmax(scores, np.where(valid, 0.0, -np.inf))
    out = T.reshape(T.matmul(T.reshape(alpha, (n, 1, k)), msg), (n, d))
    return T.relu(T.add(out, p["b"]))


GNN_LAYERS = {"GIN": gin_layer, "GCN": gcn_layer, "GAT": gat_layer}


# ----------------------------------------------------------------------------
# Model


class SacaModel:
    """Parameters plus forward pass for one :class:`SacaConfig`."""

    def __init__(self, config, seed=0, dtype=np.float64):
        self.config = config
        self.params = {}
        self.self_blocks = []
        self.fuse_blocks = []
        self.trail_blocks = []
        self.gnn = []
        self.head = []
        rng = np.random.default_rng(seed)
        c = config
        d = c.d
        self._add("sub_embed", rng.normal(0, 0.02, (c.vocab_size, d)))
        self._add("cls", rng.normal(0, 0.02, (1, d)))
        if c.uses_atoms:
            self.node_tables = [self._add(f"node_embed.{k}", rng.normal(0, 0.02, (rows, d)))
                                for k, rows in enumerate(ATOM_FEATURE_DIMS)]
        else:
            self.node_tables = []
        if c.uses_gnn:
            self.edge_tables = [self._add(f"edge_embed.{k}", rng.normal(0, 0.02, (rows, d)))
                                for k, rows in enumerate(BOND_FEATURE_DIMS)]
            for layer in range(c.N - 1):
                self.gnn.append(self._gnn_params(rng, layer))
        else:
            self.edge_tables = []
        if c.variant in ("full", "random_embedding", "no_gnn"):
            for k in range(c.N):
                self.self_blocks.append(self._block(rng, f"fusion.{k}.self"))
                self.fuse_blocks.append(self._block(rng, f"fusion.{k}.fuse"))
        else:
            for k in range(2 * c.N):
                self.self_blocks.append(self._block(rng, f"encoder.{k}"))
        for k in range(c.M):
            self.trail_blocks.append(self._block(rng, f"trail.{k}"))
        self._build_head(rng, c.task_dim, c.head_layers)
        if dtype != np.float64:
            self.astype(dtype)

    # -- construction helpers -------------------------------------------------

    def _add(self, name, data):
        t = param(np.asarray(data, dtype=np.float64), name)
        self.params[name] = t
        return t

    def _block(self, rng, prefix):
        c = self.config
        b = BlockParams.init(rng, c.d, c.h, c.d_ffn, prefix)
        for key, t in b.tensors().items():
            self.params[f"{prefix}.{key}"] = t
        return b

    def _gnn_params(self, rng, layer):
        d = self.config.d
        kind = self.config.gnn_kind
        pre = f"gnn.{layer}"
        if kind == "GIN":
            spec = {"eps": np.zeros(1), "W1": xavier(rng, d, d), "b1": np.zeros(d),
                    "W2": xavier(rng, d, d), "b2": np.zeros(d)}
        elif kind == "GCN":
            spec = {"W": xavier(rng, d, d), "b": np.zeros(d)}
        else:
            spec = {"W": xavier(rng, d, d), "a_src": xavier(rng, d, 1), "a_dst": xavier(rng, d, 1),
                    "b": np.zeros(d)}
        return {k: self._add(f"{pre}.{k}", v) for k, v in spec.items()}

    def _build_head(self, rng, task_dim, layers):
        for name in [n for n in self.params if n.startswith("head.")]:
            del self.params[name]
        d = self.config.d
        in_dim = 2 * d if self.config.variant == "end_concat" else d
        dims = [in_dim] + [d] * (layers - 1) + [task_dim]
        self.head = []
        for layer in range(layers):
            W = self._add(f"head.{layer}.W", xavier(rng, dims[layer], dims[layer + 1]))
            b = self._add(f"head.{layer}.b", np.zeros(dims[layer + 1]))
            self.head.append((W, b))

    def replace_head(self, task_dim, layers=None, seed=0):
        """Swap in a fresh task head; every trunk parameter is kept as is."""
        layers = self.config.head_layers if layers is None else layers
        self.config = replace(self.config, task_dim=task_dim, head_layers=layers)
        dtype = self.dtype
        self._build_head(np.random.default_rng(seed), task_dim, layers)
        if dtype != np.float64:
            for W, b in self.head:
                W.data = W.data.astype(dtype)
                b.data = b.data.astype(dtype)

    # -- parameter access -----------------------------------------------------

    @property
    def dtype(self):
        return self.params["cls"].data.dtype

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def astype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def save(self, path, meta=None):
        """Checkpoint: tensor blob + manifest with the config (and ``meta``) as sidecar metadata."""
        return T.save_tensors(path, self.state_dict(), meta={**(meta or {}), "config": self.config.to_dict()})

    @classmethod
    def load(cls, path):
        arrays, meta = T.load_tensors(path)
        config = SacaConfig.from_dict(meta["config"])
        dtype = next(iter(arrays.values())).dtype
        model = cls(config, dtype=dtype)
        model.load_state_dict(arrays)
        return model

    # -- forward ------------------------------------------------------------------

    def embed_nodes(self, batch):
        return T.embedding(self.node_tables, batch.node_feat)

    def node_representations(self, batch, h0=None):
        """GNN outputs ``[H0, H1, ..., H_{N-1}]`` over the flattened batch."""
        h = self.embed_nodes(batch) if h0 is None else h0
        reps = [h]
        if self.gnn:
            e = T.embedding(self.edge_tables, batch.edge_feat)
            layer_fn = GNN_LAYERS[self.config.gnn_kind]
            for p in self.gnn:
                h = layer_fn(h, batch, e, p)
                reps.append(h)
        return reps

    def _pad_nodes(self, h, batch):
        return T.gather_rows(T.concat([h, _zero_row(h)], axis=0), batch.node_pad)

    def _tokens(self, batch):
        c = self.config
        table = T.concat([self.params["cls"], self.params["sub_embed"], _zero_row(self.params["cls"])], axis=0)
        ids = batch.slot_ids if c.variant == "random_embedding" else batch.token_ids
        if c.variant == "random_embedding" and int(batch.num_keys.max(initial=0)) > c.vocab_size:
            raise ValueError("more present keys than embedding slots")
        return T.gather_rows(table, ids)

    def forward(self, batch, train=False, rng=None):
        c = self.config
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")
        p = c.dropout if train else 0.0
        kw = dict(dropout=p, rng=rng, train=train, pre_ln=c.pre_ln)
        cross, selfs = [], []
        reps = []
        if c.variant in ("full", "random_embedding", "no_gnn"):
            x = E_s0 = self._tokens(batch)
            if c.uses_gnn:
                reps = self.node_representations(batch)
            for k in range(c.N):
                x, a = transformer_block(x, self.self_blocks[k], batch.token_valid, "self", **kw)
                selfs.append(a)
                if c.uses_gnn:
                    E_n = self._pad_nodes(reps[k], batch)
                    x, a = transformer_block(x, self.fuse_blocks[k], batch.token_valid, "fuse",
                                             E_n=E_n, node_valid=batch.node_valid, E_s0=E_s0, **kw)
                    cross.append(a)
                else:
                    x, a = transformer_block(x, self.fuse_blocks[k], batch.token_valid, "self", **kw)
                    x = T.add(x, E_s0)
                    selfs.append(a)
            valid = batch.token_valid
        else:
            atoms = self._pad_nodes(self.embed_nodes(batch), batch)
            cls = T.gather_rows(self.params["cls"], np.zeros((batch.size, 1), np.int64))
            if c.variant == "begin_concat":
                x = T.concat([self._tokens(batch), atoms], axis=1)
                valid = np.concatenate([batch.token_valid, batch.node_valid], axis=1)
            else:
                x = T.concat([cls, atoms], axis=1)
                valid = np.concatenate([np.ones((batch.size, 1), bool), batch.node_valid], axis=1)
            for blk in self.self_blocks:
                x, a = transformer_block(x, blk, valid, "self", **kw)
                selfs.append(a)
        for blk in self.trail_blocks:
            x, a = transformer_block(x, blk, valid, "self", **kw)
            selfs.append(a)
        cls_out = T.reshape(T.slice_rows(x, 0, 1), (batch.size, c.d))
        feats = cls_out
        if c.variant == "end_concat":
            feats = T.concat([cls_out, self._pooled_substructures(batch)], axis=1)
        out = feats
        for i, (W, b) in enumerate(self.head):
            out = T.add(T.matmul(out, W), b)
            if i < len(self.head) - 1:
                out = T.dropout(T.relu(out), p, rng, train)
        return ModelOutput(out, cls_out, cross, selfs, reps)

    def _pooled_substructures(self, batch):
        """Mean of present substructure embeddings; zero when none are present."""
        ids = batch.token_ids[:, 1:]
        width = ids.shape[1]
        if width == 0:
            return T.Tensor(np.zeros((batch.size, self.config.d), dtype=self.dtype))
        table = T.concat([self.params["sub_embed"], _zero_row(self.params["cls"])], axis=0)
        rows = T.gather_rows(table, np.where(batch.token_valid[:, 1:], ids - 1, self.config.vocab_size))
        weights = np.zeros((batch.size, 1, width), dtype=self.dtype)
        for b, n in enumerate(batch.num_keys):
            if n:
                weights[b, 0, :n] = 1.0 / n
        return T.reshape(T.matmul(T.Tensor(weights), rows), (batch.size, self.config.d))

    def predict(self, graphs, keys):
        with T.no_grad():
            return self.forward(MolBatch.build(graphs, keys, self.config.vocab_size)).prediction.data


def build_variant(config, seed=0, dtype=np.float64):
    return SacaModel(config, seed=seed, dtype=dtype)


def forward(model, g, keys, train=False, rng=None):
    """Single-molecule forward pass."""
    return model.forward(MolBatch.build([g], [keys], model.config.vocab_size), train=train, rng=rng)


def count_parameters(model):
    """Number of learnable scalars of a model, a dict of tensors or an iterable of tensors."""
    if hasattr(model, "parameters"):
        tensors = model.parameters()
    elif isinstance(model, dict):
        tensors = model.values()
    else:
        tensors = model
    return int(sum(t.data.size for t in tensors))


def expected_parameter_count(config):
    """Closed-form parameter count for a configuration."""
    c = config
    d, f = c.d, c.d_ffn
    block = 4 * d * d + 2 * d * f + f + d + 4 * d
    gnn_layer = {"GIN": 2 * d * d + 2 * d + 1, "GCN": d * d + d, "GAT": d * d + 3 * d}[c.gnn_kind]
    in_dim = 2 * d if c.variant == "end_concat" else d
    if c.head_layers == 1:
        head = in_dim * c.task_dim + c.task_dim
    else:
        head = in_dim * d + d + (c.head_layers - 2) * (d * d + d) + d * c.task_dim + c.task_dim
    total = c.vocab_size * d + d + (2 * c.N + c.M) * block + head
    if c.uses_atoms:
        total += NODE_ROWS * d
    if c.uses_gnn:
        total += EDGE_ROWS * d + (c.N - 1) * gnn_layer
    return total


def save_config(config, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
