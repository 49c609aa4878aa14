import itertools
import os
import sys

import networkx as nx
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

sys.path.insert(0, os.path.dirname(__file__))


def to_nx(g):
    """Independent graph view used by the networkx-based oracles."""
    G = nx.Graph()
    for i, a in enumerate(g.atoms):
        G.add_node(i, atom=a)
    for b in g.bonds:
        G.add_edge(b.begin, b.end, bond_type=b.bond_type)
    return G


def nx_cycles(g, max_len=8):
    """Simple cycles as frozensets of atoms (cycle length >= 3)."""
    G = to_nx(g)
    return [c for c in nx.simple_cycles(G, length_bound=max_len) if len(c) >= 3]


def oracle_builtin_count(name, g):
    """Ring counters from networkx cycles; aromatic = all atoms aromatic or a Kekule 4n+2 ring."""
    G = to_nx(g)
    cycles = nx_cycles(g)
    if name.startswith("RING"):
        return sum(len(c) == int(name[4:]) for c in cycles)
    count = 0
    for c in cycles:
        if all(g.atoms[i].is_aromatic for i in c):
            count += 1
            continue
        types = [G.edges[c[i], c[(i + 1) % len(c)]]["bond_type"] for i in range(len(c))]
        if len(c) % 4 == 2 and all(t in ("single", "double") for t in types) \
                and all(types[i] != types[i + 1] for i in range(len(c) - 1)) and types[0] != types[-1]:
            count += 1
    return count


def oracle_match_count(pattern, g):
    """Distinct atom sets of pattern embeddings, by networkx monomorphism search."""
    P = nx.Graph()
    for i, ap in enumerate(pattern.atoms):
        P.add_node(i, spec=ap)
    for i, j, types in pattern.bonds:
        P.add_edge(i, j, types=types)

    def node_ok(gattr, pattr):
        a, ap = gattr["atom"], pattr["spec"]
        return ((ap.element is None or a.atomic_num in ap.element)
                and (ap.aromatic is None or a.is_aromatic == ap.aromatic)
                and (ap.in_ring is None or a.is_in_ring == ap.in_ring)
                and (ap.min_degree is None or a.degree >= ap.min_degree)
                and (ap.charge is None or a.formal_charge == ap.charge)
                and (ap.min_hydrogen is None or a.num_hydrogen >= ap.min_hydrogen))

    def edge_ok(gattr, pattr):
        return gattr["bond_type"] in pattr["types"]

    gm = nx.algorithms.isomorphism.GraphMatcher(to_nx(g), P, node_match=node_ok, edge_match=edge_ok)
    return len({frozenset(m) for m in gm.subgraph_monomorphisms_iter()})


def brute_ring_atoms(g):
    """Atoms on a cycle: an atom is in a ring iff removing one of its bonds keeps the ends connected."""
    n = g.num_atoms
    out = [False] * n
    for k, b in enumerate(g.bonds):
        adj = [[] for _ in range(n)]
        for kk, bb in enumerate(g.bonds):
            if kk != k:
                adj[bb.begin].append(bb.end)
                adj[bb.end].append(bb.begin)
        seen = {b.begin}
        stack = [b.begin]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if b.end in seen:
            out[b.begin] = out[b.end] = True
    return out


def graph_isomorphic(g1, g2):
    """Explicit labelled isomorphism test (networkx VF2)."""
    def nm(a, b):
        return a["atom"] == b["atom"]

    def em(a, b):
        return a["bond_type"] == b["bond_type"]

    return nx.is_isomorphic(to_nx(g1), to_nx(g2), node_match=nm, edge_match=em)


def random_permutation(g, rng):
    return g.permute(list(rng.permutation(g.num_atoms)))


@pytest.fixture(scope="session")
def vocab():
    from saca.substructure import default_vocabulary
    return default_vocabulary()


@pytest.fixture(scope="session")
def small_corpus():
    from saca.corpus import random_molecules
    return random_molecules(200, seed=11, max_atoms=14)


@pytest.fixture(scope="session")
def corpus():
    from saca.corpus import random_molecules
    return random_molecules(300, seed=5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    # importlib mode: the plugin conftest and `from conftest import` are separate modules
    lines = getattr(sys.modules.get("conftest"), "ACCEPTANCE_LINES", ACCEPTANCE_LINES)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def all_subsets(n, k):
    return itertools.combinations(range(n), k)


def rng(seed=0):
    return np.random.default_rng(seed)
