"""Molecular property prediction with substructure-atom cross attention."""

__version__ = "0.1.0"

from .chem import MolGraph, canonical_wl_hash, murcko_scaffold, parse_smiles, write_smiles
from .model import SacaConfig, SacaModel, count_parameters, expected_parameter_count
from .substructure import default_vocabulary, detect_keys, load_vocabulary, parse_vocabulary

__all__ = [
    "MolGraph", "SacaConfig", "SacaModel", "canonical_wl_hash", "count_parameters",
    "default_vocabulary", "detect_keys", "expected_parameter_count", "load_vocabulary",
    "murcko_scaffold", "parse_smiles", "parse_vocabulary", "write_smiles",
]
