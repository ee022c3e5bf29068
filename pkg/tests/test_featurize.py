from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featurizer_corpus import CORPUS
from miattn.chem import SmilesError, parse_smiles
from miattn.errors import DataError
from miattn.featurize import (
    ATOM_TYPES,
    COL_AROMATIC,
    COL_CHARGE,
    COL_CHIRALITY,
    COL_DEGREE,
    COL_HYBRIDIZATION,
    COL_NUM_H,
    COL_RING,
    COL_VALENCE,
    MAX_LEN,
    N_ATOM_FEATURES,
    N_FEATURES,
    SYMBOL_SLOT,
    SYMBOL_VOCABULARY,
    FeatureMatrix,
    TooLong,
    UnfeaturizableToken,
    featurize_smiles,
    symbol_feature_row,
    symbol_slot,
)
from smiles_fuzz import random_smiles

_TYPE_CODE = {"H": "H", "C": "C", "O": "O", "N": "N", "other": "X"}


def render_rows(fm: FeatureMatrix) -> str:
    out = []
    for i in range(1, fm.valid_rows - 1):
        kind, value = fm.row_kinds[i]
        row = fm.data[i]
        if kind == "atom":
            t = _TYPE_CODE[ATOM_TYPES[int(row[:5].argmax())]]
            cols = (COL_NUM_H, COL_DEGREE, COL_CHARGE, COL_RING, COL_AROMATIC)
            out.append(t + "," + ",".join(str(int(row[c])) for c in cols))
        elif kind == "hydrogen":
            out.append("Hrow")
        else:
            assert row[N_ATOM_FEATURES + SYMBOL_SLOT[value]] == 1
            out.append(value)
    return " ".join(out)


def partition_holds(fm: FeatureMatrix) -> bool:
    """Every valid row is exactly one atom type or exactly one symbol; padding is zero."""
    types = fm.data[:, :5]
    symbols = fm.data[:, N_ATOM_FEATURES:]
    for i in range(fm.valid_rows):
        n_type, n_sym = types[i].sum(), symbols[i].sum()
        if not ((n_type == 1 and n_sym == 0) or (n_type == 0 and n_sym == 1)):
            return False
        if n_sym == 1 and np.any(fm.data[i, :N_ATOM_FEATURES]):
            return False
    return not np.any(fm.data[fm.valid_rows:])


@pytest.mark.parametrize("smiles", list(CORPUS))
def test_corpus_rows(smiles):
    fm = featurize_smiles(smiles)
    assert render_rows(fm) == " ".join(CORPUS[smiles].split())
    assert fm.row_kinds[0] == ("start", None)
    assert fm.row_kinds[fm.valid_rows - 1] == ("end", None)
    assert partition_holds(fm)


def test_methane_matrix():
    fm = featurize_smiles("C")
    assert fm.shape == (MAX_LEN, N_FEATURES) and fm.data.dtype == np.float32
    assert fm.valid_rows == 3
    row = fm.data[1]
    assert row[ATOM_TYPES.index("C")] == 1 and row[COL_NUM_H] == 4 and row[COL_VALENCE] == 4
    assert fm.data[0, N_ATOM_FEATURES + SYMBOL_SLOT["start"]] == 1
    assert fm.data[2, N_ATOM_FEATURES + SYMBOL_SLOT["end"]] == 1


def test_formaldehyde_rows():
    fm = featurize_smiles("C=O")
    assert fm.valid_rows == 5
    assert [k for k, _ in fm.row_kinds[:5]] == ["start", "atom", "symbol", "atom", "end"]
    assert fm.data[1, COL_NUM_H] == 2 and fm.data[3, COL_NUM_H] == 0
    assert fm.data[2, N_ATOM_FEATURES + SYMBOL_SLOT["="]] == 1


def test_benzene_atom_row():
    row = featurize_smiles("c1ccccc1").data[1]
    assert row[ATOM_TYPES.index("C")] == 1
    assert (row[COL_NUM_H], row[COL_DEGREE], row[COL_RING], row[COL_AROMATIC]) == (1, 2, 1, 1)
    assert row[COL_HYBRIDIZATION + 2] == 1  # sp2
    assert row[COL_VALENCE] == 4


def test_charged_oxygen_row():
    fm = featurize_smiles("[O-]C")
    row = fm.data[2]
    assert row[ATOM_TYPES.index("O")] == 1 and row[COL_CHARGE] == -1


def test_ammonia_row():
    row = featurize_smiles("N").data[1]
    assert row[ATOM_TYPES.index("N")] == 1 and row[COL_NUM_H] == 3 and row[COL_DEGREE] == 0


def test_chirality_columns():
    fm = featurize_smiles("N[C@@H](C)O")
    assert list(fm.data[3, COL_CHIRALITY:COL_CHIRALITY + 3]) == [1, 0, 0]
    fm = featurize_smiles("N[C@H](C)O")
    assert list(fm.data[3, COL_CHIRALITY:COL_CHIRALITY + 3]) == [0, 1, 0]
    assert not fm.data[1, COL_CHIRALITY:COL_CHIRALITY + 3].any()


def test_symbol_slots():
    assert symbol_slot("=") == SYMBOL_SLOT["="]
    assert symbol_slot("1") == SYMBOL_SLOT["ring_digit"]
    assert symbol_slot("3", "charge_digit") == SYMBOL_SLOT["ion_charge"]
    assert symbol_slot(":7", "atom_class") == SYMBOL_SLOT[":"]
    assert symbol_slot("@TH1", "chiral") == SYMBOL_SLOT["@"]
    assert symbol_feature_row("=").sum() == 1
    with pytest.raises(UnfeaturizableToken):
        symbol_slot("$")
    with pytest.raises(UnfeaturizableToken):
        symbol_slot("reserved1")
    assert len(SYMBOL_VOCABULARY) == N_FEATURES - N_ATOM_FEATURES


def test_quadruple_bond_is_unfeaturizable():
    with pytest.raises(UnfeaturizableToken):
        featurize_smiles("C$C")


def test_too_long():
    with pytest.raises(TooLong):
        featurize_smiles("C" * 200)
    assert featurize_smiles("C" * 148).valid_rows == 150
    with pytest.raises(TooLong):
        featurize_smiles("C" * 149)


def test_graph_source_must_match():
    with pytest.raises(DataError):
        featurize_smiles("CC", parse_smiles("CO"))


def test_csv_and_bytes_round_trip():
    fm = featurize_smiles("CC(=O)[O-]")
    text = fm.to_csv()
    assert len(text.splitlines()) == MAX_LEN
    parsed = np.array([[float(v) for v in line.split(",")] for line in text.splitlines()], dtype=np.float32)
    assert np.array_equal(parsed, fm.data)
    assert np.array_equal(FeatureMatrix.data_from_bytes(fm.to_bytes()), fm.data)


def test_deterministic():
    a = featurize_smiles("c1ccc2ccccc2c1")
    b = featurize_smiles("c1ccc2ccccc2c1")
    assert a.to_bytes() == b.to_bytes()


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_invariant_on_fuzz(seed):
    text = random_smiles(np.random.default_rng(seed))
    try:
        fm = featurize_smiles(text)
    except (SmilesError, TooLong, UnfeaturizableToken):
        return
    assert partition_holds(fm)
    assert fm.valid_rows == len(parse_smiles(text).tokens) + 2
