"""SMILES parsing into categorical molecular graphs.

The node and edge features follow the OGB-style categorical layout: nine
atom features and three bond features, each encoded as a small integer
index where out-of-range values fall into a trailing "other" bucket.
"""

from __future__ import annotations

import hashlib
import json
import sys
from collections import Counter
from dataclasses import dataclass, field, replace

from .errors import MultiComponentError, SmilesSyntaxError, ValenceError

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co "
    "Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb "
    "Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re "
    "Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es "
    "Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: i + 1 for i, sym in enumerate(ELEMENTS)}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

# Allowed valences for implicit-hydrogen assignment, lowest first.
VALENCES = {5: (3,), 6: (4,), 7: (3, 5), 8: (2,), 15: (3, 5), 16: (2, 4, 6),
            9: (1,), 17: (1,), 35: (1,), 53: (1,)}

CHIRALITY = ("unspecified", "tetrahedral_cw", "tetrahedral_ccw", "other")
HYBRIDIZATION = ("SP", "SP2", "SP3", "SP3D", "SP3D2", "other")
BOND_TYPES = ("single", "double", "triple", "aromatic", "other")
BOND_STEREO = ("stereonone", "stereoz", "stereoe", "stereocis", "stereotrans", "stereoany")
BOND_ORDER = {"single": 1, "double": 2, "triple": 3, "aromatic": 1, "other": 4}

# Category sizes, in feature order; each includes its "other" bucket.
ATOM_FEATURE_DIMS = (119, 4, 12, 12, 10, 6, 6, 2, 2)
BOND_FEATURE_DIMS = (5, 6, 2)
ATOM_FEATURE_NAMES = ("atomic_num", "chirality", "degree", "formal_charge", "num_hydrogen",
                      "num_radical_electron", "hybridization", "is_aromatic", "is_in_ring")
BOND_FEATURE_NAMES = ("bond_type", "bond_stereo", "is_conjugated")


def _bucket(value, lo, hi):
    """Index of ``value`` in the range [lo, hi], or the "other" slot past the end."""
    if lo <= value <= hi:
        return value - lo
    return hi - lo + 1


@dataclass(frozen=True)
class Atom:
    atomic_num: int
    chirality: str = "unspecified"
    degree: int = 0
    formal_charge: int = 0
    num_hydrogen: int = 0
    num_radical_electron: int = 0
    hybridization: str = "SP3"
    is_aromatic: bool = False
    is_in_ring: bool = False

    @property
    def symbol(self):
        if 1 <= self.atomic_num <= len(ELEMENTS):
            sym = ELEMENTS[self.atomic_num - 1]
            return sym.lower() if self.is_aromatic else sym
        return "*"

    def encode(self):
        """The nine categorical indices, in feature-table order."""
        return (
            _bucket(self.atomic_num, 1, 118),
            CHIRALITY.index(self.chirality) if self.chirality in CHIRALITY else 3,
            _bucket(self.degree, 0, 10),
            _bucket(self.formal_charge, -5, 5),
            _bucket(self.num_hydrogen, 0, 8),
            _bucket(self.num_radical_electron, 0, 4),
            HYBRIDIZATION.index(self.hybridization) if self.hybridization in HYBRIDIZATION else 5,
            int(self.is_aromatic),
            int(self.is_in_ring),
        )

    @classmethod
    def decode(cls, codes):
        a, ch, deg, chg, nh, rad, hyb, arom, ring = codes
        return cls(
            atomic_num=a + 1 if a < 118 else 0,
            chirality=CHIRALITY[ch],
            degree=deg,
            formal_charge=chg - 5 if chg < 11 else 6,
            num_hydrogen=nh,
            num_radical_electron=rad,
            hybridization=HYBRIDIZATION[hyb],
            is_aromatic=bool(arom),
            is_in_ring=bool(ring),
        )


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    bond_type: str = "single"
    bond_stereo: str = "stereonone"
    is_conjugated: bool = False

    @property
    def endpoints(self):
        return (self.begin, self.end)

    def other(self, i):
        return self.end if i == self.begin else self.begin

    def encode(self):
        return (BOND_TYPES.index(self.bond_type), BOND_STEREO.index(self.bond_stereo),
                int(self.is_conjugated))


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple
    bonds: tuple
    adjacency: tuple = field(default=(), compare=False, repr=False)

    @classmethod
    def from_parts(cls, atoms, bonds):
        """Build a graph, recomputing adjacency and the degree field."""
        adj = [[] for _ in atoms]
        for k, b in enumerate(bonds):
            adj[b.begin].append((b.end, k))
            adj[b.end].append((b.begin, k))
        atoms = tuple(replace(a, degree=len(adj[i])) for i, a in enumerate(atoms))
        return cls(atoms, tuple(bonds), tuple(tuple(x) for x in adj))

    @property
    def num_atoms(self):
        return len(self.atoms)

    @property
    def num_bonds(self):
        return len(self.bonds)

    def neighbors(self, i):
        return [j for j, _ in self.adjacency[i]]

    def bond_between(self, i, j):
        for nb, k in self.adjacency[i]:
            if nb == j:
                return self.bonds[k]
        return None

    def permute(self, order):
        """Reindex atoms so that new atom ``k`` is old atom ``order[k]``."""
        inverse = {old: new for new, old in enumerate(order)}
        atoms = [self.atoms[old] for old in order]
        bonds = [replace(b, begin=inverse[b.begin], end=inverse[b.end]) for b in self.bonds]
        return MolGraph.from_parts(atoms, bonds)

    def to_dict(self):
        return {
            "atoms": [list(a.encode()) for a in self.atoms],
            "bonds": [[b.begin, b.end, *b.encode()] for b in self.bonds],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        atoms = [Atom.decode(codes) for codes in doc["atoms"]]
        bonds = [Bond(i, j, BOND_TYPES[t], BOND_STEREO[s], bool(c)) for i, j, t, s, c in doc["bonds"]]
        return cls.from_parts(atoms, bonds)


# ----------------------------------------------------------------------------
# Tokenizer / parser


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.atoms = []  # dicts, finalized later
        self.bonds = []  # [i, j, symbol or None]
        self.bond_keys = set()
        self.has_dot = False

    def error(self, msg):
        raise SmilesSyntaxError(msg, self.pos)

    def parse(self):
        text = self.text
        prev = None
        pending = None
        branches = []
        rings = {}
        while self.pos < len(text):
            c = text[self.pos]
            if c == "(":
                if prev is None:
                    self.error("branch opened before any atom")
                if pending is not None:
                    self.error("bond symbol before branch")
                branches.append(prev)
                self.pos += 1
            elif c == ")":
                if not branches:
                    self.error("unbalanced ')'")
                if pending is not None:
                    self.error("dangling bond symbol before ')'")
                prev = branches.pop()
                self.pos += 1
            elif c in "-=#:$/\\":
                if pending is not None:
                    self.error("two consecutive bond symbols")
                if prev is None:
                    self.error("bond symbol without preceding atom")
                pending = c
                self.pos += 1
            elif c.isdigit() or c == "%":
                if prev is None:
                    self.error("ring closure without preceding atom")
                num = self._ring_number()
                if num in rings:
                    other, sym = rings.pop(num)
                    if sym is not None and pending is not None and _bond_kind(sym) != _bond_kind(pending):
                        self.error(f"conflicting bond symbols on ring closure {num}")
                    self._add_bond(prev, other, sym if pending is None else pending)
                else:
                    rings[num] = (prev, pending)
                pending = None
            elif c == ".":
                if prev is None or pending is not None:
                    self.error("misplaced '.'")
                if branches:
                    self.error("'.' inside a branch")
                self.has_dot = True
                prev = None
                self.pos += 1
            else:
                idx = self._atom()
                if prev is not None:
                    self._add_bond(prev, idx, pending)
                elif pending is not None:
                    self.error("bond symbol without preceding atom")
                pending = None
                prev = idx
        if not self.atoms:
            self.error("no atoms")
        if branches:
            raise SmilesSyntaxError("unbalanced '(': branch never closed")
        if rings:
            raise SmilesSyntaxError(f"unclosed ring bond(s) {sorted(rings)}")
        if pending is not None:
            raise SmilesSyntaxError("dangling bond symbol at end of input")

    def _ring_number(self):
        text = self.text
        if text[self.pos] == "%":
            digits = text[self.pos + 1:self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                self.error("'%' must be followed by two digits")
            self.pos += 3
            return int(digits)
        self.pos += 1
        return int(text[self.pos - 1])

    def _add_bond(self, i, j, symbol):
        if i == j:
            self.error("atom bonded to itself")
        key = (min(i, j), max(i, j))
        if key in self.bond_keys:
            self.error("duplicate bond")
        self.bond_keys.add(key)
        self.bonds.append([i, j, symbol])

    def _new_atom(self, atomic_num, aromatic, bracket, hcount=0, charge=0, chiral=None):
        self.atoms.append({
            "atomic_num": atomic_num, "aromatic": aromatic, "bracket": bracket,
            "hcount": hcount, "charge": charge, "chiral": chiral,
        })
        return len(self.atoms) - 1

    def _atom(self):
        text = self.text
        c = text[self.pos]
        if c == "[":
            return self._bracket_atom()
        if c == "*":
            self.pos += 1
            return self._new_atom(0, False, False)
        for sym in ORGANIC_SUBSET:
            if text.startswith(sym, self.pos):
                self.pos += len(sym)
                return self._new_atom(ATOMIC_NUMBER[sym], False, False)
        if c in AROMATIC_ORGANIC:
            self.pos += 1
            return self._new_atom(ATOMIC_NUMBER[c.upper()], True, False)
        self.error(f"unknown atom symbol {c!r}")

    def _bracket_atom(self):
        text = self.text
        end = text.find("]", self.pos)
        if end < 0:
            self.error("unclosed '['")
        body = text[self.pos + 1:end]
        start = self.pos
        self.pos = end + 1
        i = 0
        while i < len(body) and body[i].isdigit():
            i += 1  # isotope, discarded
        aromatic = False
        atomic_num = None
        if body[i:i + 1] == "*":
            atomic_num, i = 0, i + 1
        else:
            for sym in AROMATIC_BRACKET:
                if body.startswith(sym, i):
                    atomic_num, aromatic, i = ATOMIC_NUMBER[sym.capitalize()], True, i + len(sym)
                    break
            else:
                two, one = body[i:i + 2], body[i:i + 1]
                if len(two) == 2 and two in ATOMIC_NUMBER:
                    atomic_num, i = ATOMIC_NUMBER[two], i + 2
                elif one in ATOMIC_NUMBER:
                    atomic_num, i = ATOMIC_NUMBER[one], i + 1
        if atomic_num is None:
            raise SmilesSyntaxError(f"unknown bracket atom [{body}]", start)
        chiral = None
        if body[i:i + 1] == "@":
            j = i + 1
            if body[j:j + 1] == "@":
                j += 1
            while j < len(body) and (body[j].isupper() and body[j] != "H" or body[j].isdigit()):
                j += 1
            chiral = body[i:j]
            i = j
        hcount = 0
        if body[i:i + 1] == "H":
            i += 1
            j = i
            while j < len(body) and body[j].isdigit():
                j += 1
            hcount = int(body[i:j]) if j > i else 1
            i = j
        charge = 0
        if body[i:i + 1] in ("+", "-"):
            sign = 1 if body[i] == "+" else -1
            j = i + 1
            while j < len(body) and body[j].isdigit():
                j += 1
            if j > i + 1:
                charge = sign * int(body[i + 1:j])
            else:
                while j < len(body) and body[j] == body[i]:
                    j += 1
                charge = sign * (j - i)
            i = j
        if body[i:i + 1] == ":":
            j = i + 1
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == i + 1:
                raise SmilesSyntaxError(f"empty atom class in [{body}]", start)
            i = j
        if i != len(body):
            raise SmilesSyntaxError(f"unparsed text in bracket atom [{body}]", start)
        return self._new_atom(atomic_num, aromatic, True, hcount, charge, chiral)


def _bond_kind(symbol):
    return {"-": "single", "/": "single", "\\": "single", "=": "double", "#": "triple",
            ":": "aromatic", "$": "other"}[symbol]


# ----------------------------------------------------------------------------
# Graph perception


def _components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def ring_bonds(n, edges):
    """Boolean per edge: True when the edge lies on a cycle (is not a bridge)."""
    adj = [[] for _ in range(n)]
    for k, (i, j) in enumerate(edges):
        adj[i].append((j, k))
        adj[j].append((i, k))
    disc = [-1] * n
    low = [0] * n
    in_cycle = [True] * len(edges)
    t = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = t
        t += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            for w, k in it:
                if k == via:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = t
                    t += 1
                    stack.append((w, k, iter(adj[w])))
                    break
                low[v] = min(low[v], disc[w])
            else:
                stack.pop()
                if stack:
                    u = stack[-1][0]
                    low[u] = min(low[u], low[v])
                    if low[v] > disc[u]:
                        in_cycle[via] = False
    return in_cycle


def _conjugation(n, bonds):
    unsaturated = [False] * n
    for b in bonds:
        if b.bond_type != "single":
            unsaturated[b.begin] = unsaturated[b.end] = True
    conj = []
    for b in bonds:
        if b.bond_type == "aromatic":
            conj.append(True)
        elif b.bond_type == "single":
            conj.append(unsaturated[b.begin] and unsaturated[b.end])
        else:
            conj.append(None)
    # A multiple bond is conjugated when it touches another conjugated or multiple bond.
    incident = [[] for _ in range(n)]
    for k, b in enumerate(bonds):
        incident[b.begin].append(k)
        incident[b.end].append(k)
    for k, b in enumerate(bonds):
        if conj[k] is None:
            conj[k] = any(
                kk != k and (conj[kk] is not False)
                for end in (b.begin, b.end) for kk in incident[end]
            )
    return conj


def _hybridization(bond_types, degree, hydrogens):
    if degree + hydrogens > 4:
        return "other"
    doubles = bond_types.count("double")
    if "triple" in bond_types or doubles >= 2:
        return "SP"
    if doubles or "aromatic" in bond_types:
        return "SP2"
    return "SP3"


def _implicit_hydrogens(atomic_num, aromatic, explicit_valence):
    valences = VALENCES.get(atomic_num)
    if valences is None:
        return 0
    if aromatic:
        if explicit_valence > valences[-1]:
            raise ValenceError(f"aromatic {ELEMENTS[atomic_num - 1]} with valence {explicit_valence}")
        return max(0, valences[0] - 1 - explicit_valence)
    for v in valences:
        if v >= explicit_valence:
            return v - explicit_valence
    raise ValenceError(
        f"{ELEMENTS[atomic_num - 1]} has explicit valence {explicit_valence} > {valences[-1]}")


def parse_smiles(text, keep_largest=False):
    """Parse a SMILES string into a :class:`MolGraph`.

    Supports the organic subset, aromatic lowercase atoms, bracket atoms with
    charge and hydrogen count, ring closures (``1``-``9``, ``%nn``), branches and
    the bond symbols ``- = # : $``.  Stereo markers are accepted and dropped.
    Dot-separated inputs raise :class:`MultiComponentError` unless
    ``keep_largest`` is set, in which case only the biggest fragment is kept.
    """
    if not text or not isinstance(text, str):
        raise SmilesSyntaxError("empty SMILES")
    if not text.isascii():
        raise SmilesSyntaxError("non-ASCII SMILES")
    text = text.strip()
    if not text:
        raise SmilesSyntaxError("empty SMILES")
    p = _Parser(text)
    p.parse()
    if p.has_dot and not keep_largest:
        raise MultiComponentError(f"{text!r} has several components; enable keep-largest handling")

    raw_atoms, raw_bonds = p.atoms, p.bonds
    edges = [(i, j) for i, j, _ in raw_bonds]
    if p.has_dot:
        comps = _components(len(raw_atoms), edges)
        keep = sorted(max(comps, key=len))
        remap = {old: new for new, old in enumerate(keep)}
        raw_atoms = [raw_atoms[i] for i in keep]
        raw_bonds = [[remap[i], remap[j], s] for i, j, s in raw_bonds if i in remap]
        edges = [(i, j) for i, j, _ in raw_bonds]

    n = len(raw_atoms)
    types = []
    for i, j, sym in raw_bonds:
        if sym is None:
            both_arom = raw_atoms[i]["aromatic"] and raw_atoms[j]["aromatic"]
            types.append("aromatic" if both_arom else "single")
        else:
            types.append(_bond_kind(sym))
    in_cycle = ring_bonds(n, edges)

    bond_lists = [[] for _ in range(n)]
    ring_atom = [False] * n
    for (i, j), t, cyc in zip(edges, types, in_cycle):
        bond_lists[i].append(t)
        bond_lists[j].append(t)
        if cyc:
            ring_atom[i] = ring_atom[j] = True

    atoms = []
    for i, ra in enumerate(raw_atoms):
        explicit = sum(BOND_ORDER[t] for t in bond_lists[i])
        if ra["bracket"]:
            nh = ra["hcount"]
        else:
            nh = _implicit_hydrogens(ra["atomic_num"], ra["aromatic"], explicit)
        deg = len(bond_lists[i])
        atoms.append(Atom(
            atomic_num=ra["atomic_num"],
            chirality="unspecified",
            degree=deg,
            formal_charge=ra["charge"],
            num_hydrogen=nh,
            num_radical_electron=0,
            hybridization=_hybridization(bond_lists[i], deg, nh),
            is_aromatic=ra["aromatic"],
            is_in_ring=ring_atom[i],
        ))
    plain = [Bond(i, j, t) for (i, j), t in zip(edges, types)]
    conj = _conjugation(n, plain)
    bonds = [replace(b, is_conjugated=c) for b, c in zip(plain, conj)]
    return MolGraph.from_parts(atoms, bonds)


# ----------------------------------------------------------------------------
# Writer (used for randomized round-trip checks)


def _needs_bracket(g, i):
    atom = g.atoms[i]
    if atom.formal_charge != 0 or atom.atomic_num not in VALENCES:
        return True
    if atom.is_aromatic and atom.symbol not in AROMATIC_ORGANIC:
        return True
    explicit = sum(BOND_ORDER[g.bonds[k].bond_type] for _, k in g.adjacency[i])
    try:
        return _implicit_hydrogens(atom.atomic_num, atom.is_aromatic, explicit) != atom.num_hydrogen
    except ValenceError:
        return True


def _bracket(atom):
    sym = atom.symbol
    h = atom.num_hydrogen
    hs = "" if h == 0 else ("H" if h == 1 else f"H{h}")
    q = atom.formal_charge
    qs = "" if q == 0 else (("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else ""))
    return f"[{sym}{hs}{qs}]"


def write_smiles(g, rng=None, all_brackets=False):
    """Write ``g`` as SMILES that re-parses to the same graph.

    Atoms whose hydrogen count the implicit-valence rule would not reproduce
    (or every atom, with ``all_brackets``) are written in brackets with an
    explicit count and charge.  With an ``rng`` (``random.Random`` or a numpy
    ``Generator``) the start atom and neighbor visit order are shuffled,
    giving an atom-reordered but equivalent string.
    """
    if g.num_atoms == 0:
        return ""
    comps = _components(g.num_atoms, [b.endpoints for b in g.bonds])
    if len(comps) > 1:
        raise ValueError("write_smiles needs a connected graph")
    symbols = {"single": "", "double": "=", "triple": "#", "aromatic": ":", "other": "$"}

    def bond_symbol(b):
        a1, a2 = g.atoms[b.begin], g.atoms[b.end]
        if b.bond_type == "aromatic" and a1.is_aromatic and a2.is_aromatic:
            return ""
        if b.bond_type == "single" and a1.is_aromatic and a2.is_aromatic:
            return "-"
        return symbols[b.bond_type]

    order = list(range(g.num_atoms))
    start = int(rng.choice(order)) if rng else 0
    visited = [False] * g.num_atoms
    tree_bonds = set()
    parent = {start: None}
    # first pass: DFS tree to discover ring-closure bonds
    dfs_order = []
    stack = [start]
    while stack:
        v = stack.pop()
        if visited[v]:
            continue
        visited[v] = True
        dfs_order.append(v)
        nbrs = list(g.adjacency[v])
        if rng:
            rng.shuffle(nbrs)
        for w, k in reversed(nbrs):
            if not visited[w]:
                parent[w] = (v, k)
                stack.append(w)
    for v, pk in parent.items():
        if pk is not None:
            tree_bonds.add(pk[1])
    children = {v: [] for v in range(g.num_atoms)}
    for v in dfs_order:
        pk = parent[v]
        if pk is not None:
            children[pk[0]].append((v, pk[1]))
    closures = {v: [] for v in range(g.num_atoms)}
    ring_id = {}
    next_label = [1]
    free = []
    for k, b in enumerate(g.bonds):
        if k not in tree_bonds:
            closures[b.begin].append(k)
            closures[b.end].append(k)
    pos = {v: i for i, v in enumerate(dfs_order)}
    out = []

    def label():
        if free:
            return free.pop()
        lab = next_label[0]
        next_label[0] += 1
        return lab

    def fmt(lab):
        return str(lab) if lab < 10 else f"%{lab:02d}"

    def emit(v):
        if all_brackets or _needs_bracket(g, v):
            out.append(_bracket(g.atoms[v]))
        else:
            out.append(g.atoms[v].symbol)
        for k in sorted(closures[v], key=lambda k: pos[g.bonds[k].other(v)]):
            b = g.bonds[k]
            if k in ring_id:
                lab = ring_id.pop(k)
                out.append(bond_symbol(b) + fmt(lab))
                free.append(lab)
            else:
                lab = label()
                ring_id[k] = lab
                out.append(fmt(lab))
        kids = children[v]
        for idx, (w, k) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_symbol(g.bonds[k]))
            emit(w)
            if not last:
                out.append(")")

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * g.num_atoms + 100))
    try:
        emit(start)
    finally:
        sys.setrecursionlimit(limit)
    return "".join(out)


# ----------------------------------------------------------------------------
# Hashing and scaffolds


def _h64(*parts):
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def canonical_wl_hash(g, iterations=3):
    """64-bit Weisfeiler-Lehman digest, invariant under atom reindexing."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    labels = [_h64(a.atomic_num, a.degree, a.formal_charge, a.is_aromatic, a.is_in_ring)
              for a in g.atoms]
    history = Counter(labels)
    for _ in range(iterations):
        labels = [
            _h64(labels[i], tuple(sorted((g.bonds[k].bond_type, labels[j]) for j, k in g.adjacency[i])))
            for i in range(g.num_atoms)
        ]
        history.update(labels)
    return _h64(g.num_atoms, tuple(sorted(history.items())))


def murcko_scaffold(g):
    """Ring systems plus the linker atoms joining them; acyclic input gives an empty graph."""
    keep = [True] * g.num_atoms
    if not any(a.is_in_ring for a in g.atoms):
        return MolGraph.from_parts([], [])
    deg = [len(adj) for adj in g.adjacency]
    queue = [i for i in range(g.num_atoms) if deg[i] <= 1 and not g.atoms[i].is_in_ring]
    while queue:
        v = queue.pop()
        if not keep[v]:
            continue
        keep[v] = False
        for w, _ in g.adjacency[v]:
            if keep[w]:
                deg[w] -= 1
                if deg[w] <= 1 and not g.atoms[w].is_in_ring:
                    queue.append(w)
    idx = [i for i in range(g.num_atoms) if keep[i]]
    remap = {old: new for new, old in enumerate(idx)}
    bonds = [replace(b, begin=remap[b.begin], end=remap[b.end])
             for b in g.bonds if keep[b.begin] and keep[b.end]]
    return MolGraph.from_parts([g.atoms[i] for i in idx], bonds)
