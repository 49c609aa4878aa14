"""Synthetic molecule corpora for tests, demos and benchmarks.

Molecules are assembled from ring cores, linkers and substituents, parsed
back to confirm validity, and deduplicated by WL hash.
"""

import csv

import numpy as np

from .chem import BOND_ORDER, VALENCES, Atom, Bond, MolGraph, canonical_wl_hash, parse_smiles, write_smiles
from .errors import SmilesError

# Ring cores as per-atom tokens; "{d}" is the ring-closure digit.  Atoms
# marked with a trailing "!" cannot carry a substituent.
CORES = [
    ["c{d}", "c", "c", "c", "c", "c{d}"],
    ["c{d}", "c", "c", "n!", "c", "c{d}"],
    ["C{d}", "C", "C", "C", "C", "C{d}"],
    ["C{d}", "C", "C", "C", "C{d}"],
    ["c{d}", "c", "c", "s!", "c{d}"],
    ["c{d}", "c", "c", "o!", "c{d}"],
    ["c{d}", "c", "[nH]!", "c", "c{d}"],
    ["C{d}", "C", "N!", "C", "C", "C{d}"],
    ["C{d}", "C", "O!", "C", "C", "C{d}"],
    ["C{d}", "C", "C{d}"],
    ["C{d}", "C", "C", "C{d}"],
]
LINKERS = ["", "C", "CC", "O", "N", "C(=O)N", "C(=O)O", "CCC", "S"]
SUBSTITUENTS = ["C", "CC", "O", "N", "F", "Cl", "Br", "C(=O)O", "C(=O)N", "OC", "C#N",
                "[N+](=O)[O-]", "S", "C=C", "CCO", "NC(=O)C", "C(C)(C)C", "I", "C(F)(F)F"]
CHAINS = ["CCO", "CCCN", "CC(=O)O", "CCOC(=O)C", "C=CC#N", "CC(C)CO", "NCC(=O)O", "CCS",
          "OCCO", "CC(Cl)CBr", "CCCCCC", "CC(=O)NC", "C#CC"]


def _core(rng, digit, max_subs):
    tokens = CORES[rng.integers(len(CORES))]
    out = []
    subs = 0
    for pos, tok in enumerate(tokens):
        # the end atoms take the linkers, so they stay unsubstituted
        fixed = tok.endswith("!") or pos in (0, len(tokens) - 1)
        atom = tok.rstrip("!").format(d=digit)
        if not fixed and subs < max_subs and rng.random() < 0.3:
            atom += "(" + SUBSTITUENTS[rng.integers(len(SUBSTITUENTS))] + ")"
            subs += 1
        out.append(atom)
    return "".join(out)


def valence_ok(g):
    """Every organic-subset atom stays within its largest normal valence."""
    used = [a.num_hydrogen for a in g.atoms]
    for b in g.bonds:
        for i in b.endpoints:
            used[i] += BOND_ORDER[b.bond_type]
    for a, u in zip(g.atoms, used):
        allowed = VALENCES.get(a.atomic_num)
        if allowed and a.formal_charge == 0 and u + a.is_aromatic > max(allowed):
            return False
    return True


def random_smiles(rng, max_cores=2, max_subs=2):
    """One random molecule string from the fragment grammar."""
    r = rng.random()
    if r < 0.15:
        smi = CHAINS[rng.integers(len(CHAINS))]
        if rng.random() < 0.5:
            smi += SUBSTITUENTS[rng.integers(len(SUBSTITUENTS))]
        return smi
    n_cores = 1 + int(rng.integers(max_cores))
    parts = []
    if rng.random() < 0.4:
        parts.append(SUBSTITUENTS[rng.integers(len(SUBSTITUENTS))])
    for k in range(n_cores):
        if k:
            parts.append(LINKERS[rng.integers(len(LINKERS))])
        parts.append(_core(rng, k + 1, max_subs))
    return "".join(parts)


def random_molecules(n, seed=0, max_atoms=None, min_atoms=1, max_cores=2, max_subs=2,
                     randomize_writer=True):
    """``n`` distinct (by WL hash) molecules as (smiles, graph) pairs.

    With ``randomize_writer`` the stored string is a randomized rewrite of
    the parsed graph, so atom orders vary beyond the grammar's.
    """
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise RuntimeError(f"could only generate {len(out)} distinct molecules")
        smi = random_smiles(rng, max_cores, max_subs)
        try:
            g = parse_smiles(smi)
        except SmilesError:
            continue
        if not valence_ok(g) or g.num_atoms < min_atoms or (max_atoms is not None and g.num_atoms > max_atoms):
            continue
        h = canonical_wl_hash(g)
        if h in seen:
            continue
        seen.add(h)
        if randomize_writer:
            smi = write_smiles(g, rng=rng)
            g = parse_smiles(smi)
        out.append((smi, g))
    return out


def synthetic_target(g):
    """Smooth structural target used by the ESOL-format corpus (log-solubility-like)."""
    heavy = g.num_atoms
    polar = sum(a.atomic_num in (7, 8) for a in g.atoms)
    halo = sum(a.atomic_num in (9, 17, 35, 53) for a in g.atoms)
    arom = sum(a.is_aromatic for a in g.atoms)
    donors = sum(a.atomic_num in (7, 8) and a.num_hydrogen > 0 for a in g.atoms)
    return 1.5 - 0.3 * heavy + 0.6 * polar + 0.4 * donors - 0.5 * halo - 0.1 * arom


def write_esol_csv(path, n=500, seed=0, noise=0.1):
    """ESOL-format file: header ``smiles,measured_log_solubility``."""
    rng = np.random.default_rng([seed, 7])
    mols = random_molecules(n, seed=seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "measured_log_solubility"])
        for smi, g in mols:
            w.writerow([smi, f"{synthetic_target(g) + noise * rng.normal():.6f}"])
    return path


def chain_with_rings(n, ring_every=10):
    """Alkane chain of ``n`` carbons closing a cyclopropane at every ``ring_every``-th atom.

    Ring closures are bonds from atom ``i`` back to ``i - 2`` which keeps the
    atom count exactly ``n`` and the graph sparse.
    """
    atoms = [Atom(atomic_num=6) for _ in range(n)]
    bonds = [Bond(i - 1, i) for i in range(1, n)]
    ring_atoms = set()
    for i in range(ring_every - 1, n, ring_every):
        if i >= 2:
            bonds.append(Bond(i - 2, i))
            ring_atoms.update((i - 2, i - 1, i))
    h = [0] * n
    deg = [0] * n
    for b in bonds:
        deg[b.begin] += 1
        deg[b.end] += 1
    for i in range(n):
        h[i] = max(0, 4 - deg[i])
    atoms = [Atom(atomic_num=6, num_hydrogen=h[i], is_in_ring=i in ring_atoms) for i in range(n)]
    return MolGraph.from_parts(atoms, bonds)
