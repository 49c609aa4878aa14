"""Substructure-key vocabularies and exact subgraph matching.

A vocabulary is an ordered list of patterns; detecting it on a molecule
yields a binary key vector whose set bits become Transformer tokens.
Patterns are small labeled graphs matched by backtracking, or builtin ring
counters (``RING3`` .. ``RING8``, ``AROMATIC_RING``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .chem import ATOMIC_NUMBER, BOND_TYPES, ELEMENTS
from .errors import PatternTooLarge, VocabSyntaxError

MAX_PATTERN_ATOMS = 12
MAX_RING = 8
BUILTINS = tuple(f"RING{k}" for k in range(3, MAX_RING + 1)) + ("AROMATIC_RING",)
ANY_BOND = frozenset(BOND_TYPES)

_BOND_ALIASES = {"-": "single", "=": "double", "#": "triple", ":": "aromatic", "$": "other"}


@dataclass(frozen=True)
class AtomPattern:
    element: frozenset | None = None
    aromatic: bool | None = None
    in_ring: bool | None = None
    min_degree: int | None = None
    charge: int | None = None
    min_hydrogen: int | None = None

    def __post_init__(self):
        if all(getattr(self, f) is None for f in
               ("element", "aromatic", "in_ring", "min_degree", "charge", "min_hydrogen")):
            raise ValueError("atom pattern needs at least one constraint")

    def matches(self, atom):
        return ((self.element is None or atom.atomic_num in self.element)
                and (self.aromatic is None or atom.is_aromatic == self.aromatic)
                and (self.in_ring is None or atom.is_in_ring == self.in_ring)
                and (self.min_degree is None or atom.degree >= self.min_degree)
                and (self.charge is None or atom.formal_charge == self.charge)
                and (self.min_hydrogen is None or atom.num_hydrogen >= self.min_hydrogen))


@dataclass(frozen=True)
class Pattern:
    name: str
    atoms: tuple = ()
    bonds: tuple = ()  # (i, j, frozenset of bond types)
    min_count: int = 1
    builtin: str | None = None

    def __post_init__(self):
        if self.builtin is not None:
            if self.builtin not in BUILTINS:
                raise ValueError(f"unknown builtin {self.builtin}")
            if self.atoms or self.bonds:
                raise ValueError("builtin patterns carry no atoms or bonds")
            return
        if not self.atoms:
            raise ValueError("pattern has no atoms")
        k = len(self.atoms)
        seen = set()
        for i, j, types in self.bonds:
            if not (0 <= i < k and 0 <= j < k) or i == j:
                raise ValueError(f"bond ({i},{j}) out of range")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate bond ({i},{j})")
            seen.add(key)
            if not types or not types <= ANY_BOND:
                raise ValueError("bad bond type set")
        if not _connected(k, [(i, j) for i, j, _ in self.bonds]):
            raise ValueError("pattern graph must be connected")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")


@dataclass(frozen=True)
class SubstructureVocabulary:
    patterns: tuple
    version: str = "custom"

    def __post_init__(self):
        names = [p.name for p in self.patterns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate pattern names")

    def __len__(self):
        return len(self.patterns)

    @property
    def names(self):
        return [p.name for p in self.patterns]

    def index(self, name):
        return self.names.index(name)


@dataclass(frozen=True)
class KeyVector:
    bits: tuple
    present_indices: tuple = field(default=())

    @classmethod
    def from_bits(cls, bits):
        bits = tuple(bool(b) for b in bits)
        return cls(bits, tuple(i for i, b in enumerate(bits) if b))

    def __len__(self):
        return len(self.bits)

    def to_csv_row(self):
        return ",".join("1" if b else "0" for b in self.bits)


def _connected(n, edges):
    if n == 0:
        return True
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


# ----------------------------------------------------------------------------
# Cycles


def simple_cycles(g, max_len=MAX_RING):
    """All simple cycles of length 3..max_len as atom tuples.

    Each cycle is reported once, rooted at its smallest atom index and oriented
    so the second atom is smaller than the last.
    """
    cycles = []
    adj = [sorted(j for j, _ in g.adjacency[i]) for i in range(g.num_atoms)]
    for s in range(g.num_atoms):
        path = [s]
        on_path = {s}
        stack = [iter(w for w in adj[s] if w > s)]
        while stack:
            w = next(stack[-1], None)
            if w is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            if len(path) >= 2 and s in adj[w] and path[1] < w:
                cycles.append(tuple(path) + (w,))
            if len(path) < max_len - 1:
                path.append(w)
                on_path.add(w)
                stack.append(iter(x for x in adj[w] if x > s and x not in on_path))
    return cycles


def _is_aromatic_cycle(g, cyc):
    if all(g.atoms[i].is_aromatic for i in cyc):
        return True
    # Kekule form: alternating single/double bonds around a 4n+2 ring
    k = len(cyc)
    if k % 4 != 2:
        return False
    types = [g.bond_between(cyc[i], cyc[(i + 1) % k]).bond_type for i in range(k)]
    return all(t == ("double" if i % 2 == 0 else "single") for i, t in enumerate(types)) or \
        all(t == ("single" if i % 2 == 0 else "double") for i, t in enumerate(types))


def _count_builtin(name, g):
    if name == "AROMATIC_RING":
        return sum(1 for c in simple_cycles(g) if _is_aromatic_cycle(g, c))
    k = int(name[4:])
    return sum(1 for c in simple_cycles(g, k) if len(c) == k)


# ----------------------------------------------------------------------------
# Pattern matching


def _search_order(p, candidates):
    k = len(p.atoms)
    nbrs = [[] for _ in range(k)]
    for i, j, _ in p.bonds:
        nbrs[i].append(j)
        nbrs[j].append(i)
    order = [min(range(k), key=lambda a: (len(candidates[a]), -len(nbrs[a]), a))]
    placed = set(order)
    while len(order) < k:
        frontier = [a for a in range(k) if a not in placed and any(b in placed for b in nbrs[a])]
        nxt = min(frontier, key=lambda a: (-sum(b in placed for b in nbrs[a]), len(candidates[a]), a))
        order.append(nxt)
        placed.add(nxt)
    return order


def iter_matches(p, g):
    """Yield distinct matched atom-index sets (as frozensets) of a non-builtin pattern."""
    k = len(p.atoms)
    if k > MAX_PATTERN_ATOMS:
        raise PatternTooLarge(f"pattern {p.name!r} has {k} atoms (max {MAX_PATTERN_ATOMS})")
    if k > g.num_atoms:
        return
    candidates = [frozenset(i for i, a in enumerate(g.atoms) if ap.matches(a)) for ap in p.atoms]
    if any(not c for c in candidates):
        return
    order = _search_order(p, candidates)
    # constraints[a] = list of (earlier pattern atom, allowed bond types)
    pos = {a: n for n, a in enumerate(order)}
    constraints = [[] for _ in range(k)]
    for i, j, types in p.bonds:
        if pos[i] < pos[j]:
            constraints[j].append((i, types))
        else:
            constraints[i].append((j, types))
    mapping = [-1] * k
    used = set()
    seen = set()

    def extend(depth):
        if depth == k:
            image = frozenset(mapping)
            if image not in seen:
                seen.add(image)
                yield image
            return
        a = order[depth]
        cons = constraints[a]
        if cons:
            anchor = mapping[cons[0][0]]
            pool = [j for j, _ in g.adjacency[anchor]]
        else:
            pool = sorted(candidates[a])
        for v in pool:
            if v in used or v not in candidates[a]:
                continue
            ok = True
            for b, types in cons:
                bond = g.bond_between(mapping[b], v)
                if bond is None or bond.bond_type not in types:
                    ok = False
                    break
            if not ok:
                continue
            mapping[a] = v
            used.add(v)
            yield from extend(depth + 1)
            used.discard(v)
            mapping[a] = -1

    yield from extend(0)


def match_pattern(p, g, limit=None):
    """Number of distinct embeddings of ``p`` in ``g`` (distinct atom sets).

    ``limit`` stops counting early once that many matches are found.
    """
    if p.builtin is not None:
        return _count_builtin(p.builtin, g)
    count = 0
    for _ in iter_matches(p, g):
        count += 1
        if limit is not None and count >= limit:
            break
    return count


def detect_keys(v, g):
    if len(v) == 0:
        raise ValueError("empty vocabulary")
    return KeyVector.from_bits(match_pattern(p, g, limit=p.min_count) >= p.min_count for p in v.patterns)


def pattern_from_graph(g, name="self"):
    """A pattern requiring the exact atom labels and bond types of ``g``."""
    atoms = tuple(
        AtomPattern(element=frozenset({a.atomic_num}), aromatic=a.is_aromatic, in_ring=a.is_in_ring,
                    min_degree=a.degree, charge=a.formal_charge, min_hydrogen=a.num_hydrogen)
        for a in g.atoms)
    bonds = tuple((b.begin, b.end, frozenset({b.bond_type})) for b in g.bonds)
    return Pattern(name, atoms, bonds)


# ----------------------------------------------------------------------------
# Vocabulary DSL

_FIELD = re.compile(r"(\w+)=(\[[^\]]*\]|\S+)")
_ATOM_KEYS = {"el", "arom", "ring", "minH", "chg", "mindeg"}


def _parse_bool(text, lineno):
    if text not in ("0", "1"):
        raise VocabSyntaxError(f"expected 0 or 1, got {text!r}", lineno)
    return text == "1"


def _parse_int(text, lineno):
    try:
        return int(text)
    except ValueError:
        raise VocabSyntaxError(f"expected an integer, got {text!r}", lineno) from None


def _parse_atom(spec, lineno):
    kw = {}
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        key, sep, val = tok.partition("=")
        if not sep or key not in _ATOM_KEYS:
            raise VocabSyntaxError(f"bad atom token {tok!r}", lineno)
        if key == "el":
            nums = set()
            for sym in val.split("|"):
                if sym not in ATOMIC_NUMBER:
                    raise VocabSyntaxError(f"unknown element {sym!r}", lineno)
                nums.add(ATOMIC_NUMBER[sym])
            kw["element"] = frozenset(nums)
        elif key == "arom":
            kw["aromatic"] = _parse_bool(val, lineno)
        elif key == "ring":
            kw["in_ring"] = _parse_bool(val, lineno)
        elif key == "minH":
            kw["min_hydrogen"] = _parse_int(val, lineno)
        elif key == "chg":
            kw["charge"] = _parse_int(val, lineno)
        else:
            kw["min_degree"] = _parse_int(val, lineno)
    try:
        return AtomPattern(**kw)
    except ValueError as exc:
        raise VocabSyntaxError(str(exc), lineno) from None


def _parse_bonds(body, lineno):
    bonds = []
    for item in body.split(";"):
        item = item.strip()
        if not item:
            continue
        m = re.fullmatch(r"\(\s*(\d+)\s*,\s*(\d+)\s*,\s*([^)]+?)\s*\)", item)
        if not m:
            raise VocabSyntaxError(f"bad bond {item!r}", lineno)
        types = set()
        for t in m.group(3).split("|"):
            t = _BOND_ALIASES.get(t, t)
            if t in ("any", "~"):
                types |= ANY_BOND
            elif t in BOND_TYPES:
                types.add(t)
            else:
                raise VocabSyntaxError(f"unknown bond type {t!r}", lineno)
        bonds.append((int(m.group(1)), int(m.group(2)), frozenset(types)))
    return tuple(bonds)


def parse_vocabulary(text, version="custom"):
    patterns = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, _, rest = line.partition(" ")
        if not re.fullmatch(r"[A-Za-z_][\w\-]*", name):
            raise VocabSyntaxError(f"bad pattern name {name!r}", lineno)
        if name in names:
            raise VocabSyntaxError(f"duplicate pattern name {name!r}", lineno)
        fields = {}
        leftover = _FIELD.sub("", rest).strip()
        if leftover:
            raise VocabSyntaxError(f"unparsed text {leftover!r}", lineno)
        for key, val in _FIELD.findall(rest):
            if key in fields:
                raise VocabSyntaxError(f"repeated field {key!r}", lineno)
            fields[key] = val
        unknown = set(fields) - {"min_count", "atoms", "bonds", "builtin"}
        if unknown:
            raise VocabSyntaxError(f"unknown field(s) {sorted(unknown)}", lineno)
        min_count = _parse_int(fields.get("min_count", "1"), lineno)
        try:
            if "builtin" in fields:
                if "atoms" in fields or "bonds" in fields:
                    raise VocabSyntaxError("builtin patterns take no atoms/bonds", lineno)
                pat = Pattern(name, min_count=min_count, builtin=fields["builtin"])
            else:
                atoms_txt = fields.get("atoms")
                if atoms_txt is None or not (atoms_txt.startswith("[") and atoms_txt.endswith("]")):
                    raise VocabSyntaxError("missing atoms=[...]", lineno)
                atoms = tuple(_parse_atom(s, lineno) for s in atoms_txt[1:-1].split(";") if s.strip())
                bonds_txt = fields.get("bonds", "[]")
                if not (bonds_txt.startswith("[") and bonds_txt.endswith("]")):
                    raise VocabSyntaxError("bonds must be bracketed", lineno)
                pat = Pattern(name, atoms, _parse_bonds(bonds_txt[1:-1], lineno), min_count)
        except ValueError as exc:
            if isinstance(exc, VocabSyntaxError):
                raise
            raise VocabSyntaxError(str(exc), lineno) from None
        names.add(name)
        patterns.append(pat)
    if not patterns:
        raise VocabSyntaxError("vocabulary defines no patterns")
    return SubstructureVocabulary(tuple(patterns), version)


def load_vocabulary(path):
    path = Path(path)
    return parse_vocabulary(path.read_text(), version=path.name)


DEFAULT_VOCAB_TEXT = """\
# name            definition
hydroxy           atoms=[el=O,minH=1;mindeg=1] bonds=[(0,1,any)]
carbonyl          atoms=[el=C;el=O] bonds=[(0,1,double)]
carboxyl          atoms=[el=C;el=O;el=O,minH=1] bonds=[(0,1,double);(0,2,single)]
primary_amine     atoms=[el=N,minH=2,arom=0;el=C] bonds=[(0,1,single)]
nitro             atoms=[el=N;el=O;el=O;mindeg=1] bonds=[(0,1,any);(0,2,any);(0,3,single)]
halogen_on_carbon atoms=[el=F|Cl|Br|I;el=C] bonds=[(0,1,single)]
thiophene_s       atoms=[el=S,arom=1,ring=1;el=C,arom=1] bonds=[(0,1,aromatic)]
ring3             builtin=RING3
ring4             builtin=RING4
ring5             builtin=RING5
ring6             builtin=RING6
ring7             builtin=RING7
ring8             builtin=RING8
aromatic_ring     builtin=AROMATIC_RING
n_heterocycle     atoms=[el=N,ring=1;el=C,ring=1] bonds=[(0,1,any)]
methyl_terminal   atoms=[el=C,minH=3;mindeg=1] bonds=[(0,1,single)]
ether             atoms=[el=O,arom=0;el=C;el=C] bonds=[(0,1,single);(0,2,single)]
ester             atoms=[el=C;el=O;el=O;el=C] bonds=[(0,1,double);(0,2,single);(2,3,single)]
amide             atoms=[el=C;el=O;el=N] bonds=[(0,1,double);(0,2,single)]
nitrile           atoms=[el=C;el=N] bonds=[(0,1,triple)]
alkene            atoms=[el=C;el=C] bonds=[(0,1,double)]
alkyne            atoms=[el=C;el=C] bonds=[(0,1,triple)]
aromatic_nitrogen atoms=[el=N,arom=1;arom=1] bonds=[(0,1,aromatic)]
thiol             atoms=[el=S,minH=1;mindeg=1] bonds=[(0,1,single)]
sulfonyl          atoms=[el=S;el=O;el=O] bonds=[(0,1,double);(0,2,double)]
phosphoryl        atoms=[el=P;el=O] bonds=[(0,1,any)]
fluoro            atoms=[el=F;mindeg=1] bonds=[(0,1,single)]
chloro            atoms=[el=Cl;mindeg=1] bonds=[(0,1,single)]
bromo_iodo        atoms=[el=Br|I;mindeg=1] bonds=[(0,1,single)]
secondary_amine   atoms=[el=N,minH=1,arom=0;el=C;el=C] bonds=[(0,1,single);(0,2,single)]
quaternary_carbon atoms=[el=C,mindeg=4;el=C] bonds=[(0,1,single)]
oxyanion          atoms=[el=O,chg=-1;mindeg=1] bonds=[(0,1,any)]
"""


def default_vocabulary():
    return parse_vocabulary(DEFAULT_VOCAB_TEXT, version="default-32")


def element_symbols(pattern_atom):
    """Human-readable element list of an atom pattern (for reports)."""
    if pattern_atom.element is None:
        return "*"
    return "|".join(ELEMENTS[z - 1] for z in sorted(pattern_atom.element))
