import numpy as np
import pytest

from conftest import nx_cycles, oracle_builtin_count, oracle_match_count, random_permutation
from saca.chem import parse_smiles
from saca.errors import PatternTooLarge, VocabSyntaxError
from saca.substructure import (AtomPattern, KeyVector, Pattern, detect_keys, load_vocabulary,
                               match_pattern, parse_vocabulary, pattern_from_graph, simple_cycles)

PHENOL = "C1=CC=C(C=C1)O"
DECALIN = "C1CCC2CCCCC2C1"
BICYCLOPENTYL = "C1CCCC1C1CCCC1"


def pat(vocab, name):
    return vocab.patterns[vocab.index(name)]


def test_default_vocabulary(vocab):
    assert len(vocab) == 32 and len(set(vocab.names)) == 32
    for name in ("hydroxy", "carbonyl", "carboxyl", "primary_amine", "nitro", "halogen_on_carbon",
                 "thiophene_s", "ring3", "ring8", "aromatic_ring", "n_heterocycle", "methyl_terminal"):
        assert name in vocab.names


def test_phenol_examples(vocab):
    g = parse_smiles(PHENOL)
    assert match_pattern(pat(vocab, "hydroxy"), g) == 1
    assert match_pattern(pat(vocab, "aromatic_ring"), g) == 1
    assert match_pattern(pat(vocab, "aromatic_ring"), parse_smiles("c1ccccc1O")) == 1
    assert match_pattern(pat(vocab, "aromatic_ring"), parse_smiles("CCO")) == 0
    kv = detect_keys(vocab, g)
    assert kv.bits[vocab.index("hydroxy")] and kv.bits[vocab.index("aromatic_ring")]


def test_ring_counts(vocab):
    dec, bcp = parse_smiles(DECALIN), parse_smiles(BICYCLOPENTYL)
    assert match_pattern(pat(vocab, "ring6"), dec) == 2
    assert match_pattern(pat(vocab, "ring5"), dec) == 0
    assert match_pattern(pat(vocab, "ring5"), bcp) == 2
    kd, kb = detect_keys(vocab, dec), detect_keys(vocab, bcp)
    diff = {vocab.names[i] for i in range(len(vocab)) if kd.bits[i] != kb.bits[i]}
    assert diff == {"ring5", "ring6"}


def test_methane_has_no_keys(vocab):
    kv = detect_keys(vocab, parse_smiles("C"))
    assert not any(kv.bits) and kv.present_indices == ()


def test_cycles_match_oracle(small_corpus):
    for _, g in small_corpus:
        # compared as multisets of atom sets: two cycles may share a set when chords exist
        assert sorted(sorted(c) for c in simple_cycles(g)) == sorted(sorted(c) for c in nx_cycles(g))
        for k in range(3, 9):
            p = Pattern(f"r{k}", builtin=f"RING{k}")
            assert match_pattern(p, g) == sum(len(c) == k for c in nx_cycles(g))


def test_patterns_match_oracle(vocab, small_corpus):
    for _, g in small_corpus[:120]:
        for p in vocab.patterns:
            want = oracle_builtin_count(p.builtin, g) if p.builtin else oracle_match_count(p, g)
            assert match_pattern(p, g) == want, (p.name,)


def test_kekule_aromatic_ring():
    g = parse_smiles("C1=CC=CC=C1")
    p = Pattern("arom", builtin="AROMATIC_RING")
    assert match_pattern(p, g) == oracle_builtin_count("AROMATIC_RING", g) == 1
    # cyclohexene is not alternating
    assert match_pattern(p, parse_smiles("C1=CCCCC1")) == 0


def test_key_permutation_invariance(vocab, corpus):
    rng = np.random.default_rng(1)
    for _, g in corpus[:60]:
        assert detect_keys(vocab, random_permutation(g, rng)) == detect_keys(vocab, g)


def test_self_pattern_matches(small_corpus):
    for _, g in small_corpus[:80]:
        if g.num_atoms <= 12:
            assert match_pattern(pattern_from_graph(g), g) >= 1


def test_pattern_too_large():
    g = parse_smiles("C" * 14)
    with pytest.raises(PatternTooLarge):
        match_pattern(pattern_from_graph(g), g)


def test_min_count():
    v = parse_vocabulary("two_oh min_count=2 atoms=[el=O,minH=1;mindeg=1] bonds=[(0,1,any)]")
    assert not detect_keys(v, parse_smiles("OCC")).bits[0]
    assert detect_keys(v, parse_smiles("OCCO")).bits[0]


def test_dsl_round_trip(tmp_path):
    text = """
    # comment line
    acid   atoms=[el=C;el=O;el=O,minH=1] bonds=[(0,1,=);(0,2,single)]  # trailing comment
    ring   builtin=RING5
    anion  atoms=[chg=-1]
    aroN   atoms=[el=N,arom=1,ring=1,mindeg=2]
    """
    path = tmp_path / "v.txt"
    path.write_text(text)
    v = load_vocabulary(path)
    assert v.names == ["acid", "ring", "anion", "aroN"]
    kv = detect_keys(v, parse_smiles("OC(=O)C1CCCC1"))
    assert kv.bits == (True, True, False, False)
    assert detect_keys(v, parse_smiles("c1ccncc1")).bits[3]
    assert KeyVector.from_bits(kv.bits).to_csv_row() == "1,1,0,0"


@pytest.mark.parametrize("text,line", [
    ("", None),
    ("# only a comment\n", None),
    ("a builtin=RING5\na builtin=RING6", 2),
    ("a atoms=[el=Zz]", 1),
    ("a builtin=RING9", 1),
    ("a atoms=[el=C;el=O]", 1),
    ("a atoms=[el=C] colour=red", 1),
    ("ok builtin=RING3\nb atoms=[el=C;el=C] bonds=[(0,5,single)]", 2),
    ("a atoms=[]", 1),
    ("a atoms=[el=C;el=C] bonds=[(0,1,quadruple)]", 1),
])
def test_dsl_errors(text, line):
    with pytest.raises(VocabSyntaxError) as info:
        parse_vocabulary(text)
    if line is not None:
        assert info.value.line == line


def test_atom_pattern_needs_constraint():
    with pytest.raises(ValueError):
        AtomPattern()
