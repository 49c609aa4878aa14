"""Graph-computable molecular descriptors used as a pretraining target."""

import numpy as np

from .chem import ELEMENTS
from .substructure import simple_cycles

DESCRIPTOR_NAMES = (
    "atom_count", "bond_count", "ring_count", "aromatic_fraction", "heteroatom_count",
    "halogen_count", "mean_degree", "max_degree", "mol_weight", "hbond_donors",
    "hbond_acceptors", "rotatable_bonds", "formal_charge_sum", "ring_atom_fraction",
    "ring5_count", "ring6_count",
)

# Standard atomic weights of common elements; others use 2 * Z as a proxy.
ATOMIC_MASS = {
    "H": 1.008, "Li": 6.94, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
    "Na": 22.990, "Mg": 24.305, "Al": 26.982, "Si": 28.085, "P": 30.974, "S": 32.06,
    "Cl": 35.45, "K": 39.098, "Ca": 40.078, "Ti": 47.867, "Cr": 51.996, "Mn": 54.938,
    "Fe": 55.845, "Co": 58.933, "Ni": 58.693, "Cu": 63.546, "Zn": 65.38, "Ge": 72.63,
    "As": 74.922, "Se": 78.971, "Br": 79.904, "Ag": 107.87, "Sn": 118.71, "Sb": 121.76,
    "Te": 127.60, "I": 126.90, "Pt": 195.08, "Au": 196.97, "Hg": 200.59, "Pb": 207.2,
    "Bi": 208.98,
}
HALOGENS = {9, 17, 35, 53, 85}


def atomic_mass(z):
    if 1 <= z <= len(ELEMENTS):
        return ATOMIC_MASS.get(ELEMENTS[z - 1], 2.0 * z)
    return 0.0


def _components(g):
    seen = [False] * g.num_atoms
    count = 0
    for s in range(g.num_atoms):
        if seen[s]:
            continue
        count += 1
        stack = [s]
        seen[s] = True
        while stack:
            v = stack.pop()
            for w, _ in g.adjacency[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
    return count


def compute_descriptors(g):
    """The 16 descriptors, in :data:`DESCRIPTOR_NAMES` order."""
    n = g.num_atoms
    atoms = g.atoms
    degrees = [a.degree for a in atoms]
    cycles = simple_cycles(g, 6)
    rotatable = 0
    for b in g.bonds:
        if b.bond_type != "single":
            continue
        i, j = b.endpoints
        if atoms[i].is_in_ring and atoms[j].is_in_ring:
            # single bond inside a ring system cannot rotate; ring-ring links can
            if _in_same_cycle_system(g, i, j):
                continue
        if degrees[i] > 1 and degrees[j] > 1:
            rotatable += 1
    values = [
        n,
        g.num_bonds,
        g.num_bonds - n + _components(g),
        sum(a.is_aromatic for a in atoms) / n if n else 0.0,
        sum(a.atomic_num not in (1, 6) for a in atoms),
        sum(a.atomic_num in HALOGENS for a in atoms),
        float(np.mean(degrees)) if n else 0.0,
        max(degrees, default=0),
        sum(atomic_mass(a.atomic_num) + a.num_hydrogen * ATOMIC_MASS["H"] for a in atoms),
        sum(a.atomic_num in (7, 8) and a.num_hydrogen > 0 for a in atoms),
        sum(a.atomic_num in (7, 8) for a in atoms),
        rotatable,
        sum(a.formal_charge for a in atoms),
        sum(a.is_in_ring for a in atoms) / n if n else 0.0,
        sum(len(c) == 5 for c in cycles),
        sum(len(c) == 6 for c in cycles),
    ]
    return np.array(values, dtype=np.float64)


def _in_same_cycle_system(g, i, j):
    """True when the bond i-j is not a bridge (lies on some cycle)."""
    seen = {i}
    stack = [i]
    while stack:
        v = stack.pop()
        for w, _ in g.adjacency[v]:
            if v == i and w == j:
                continue
            if w == j:
                return True
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return False
