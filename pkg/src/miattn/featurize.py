"""SMILES feature matrix: one 42-wide row per token, padded to 150 rows.

Columns 0-20 describe atoms, columns 21-41 are a one-hot over
:data:`SYMBOL_VOCABULARY`::

    0-4    atom type one-hot (H, C, O, N, other)
    5      attached hydrogens
    6      graph degree (explicit neighbours)
    7      formal charge
    8      total valence
    9      in ring
    10     aromatic
    11-13  chirality one-hot (R, S, other); all zero when unspecified
    14-20  hybridization one-hot (s, sp, sp2, sp3, sp3d, sp3d2, other)
    21-41  symbol slots

Row 0 is the start marker and the row after the last token is the end
marker. Everything after that is zero.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from miattn.chem import AtomNode, Chirality, Hybridization, MolGraph, Token, parse_smiles, total_valence
from miattn.errors import DataError

MAX_LEN = 150
N_FEATURES = 42
N_ATOM_FEATURES = 21

VOCABULARY_VERSION = "smiles-symbols-v1"
SYMBOL_VOCABULARY = (
    "(", ")", "[", "]", ".", ":", "=", "#", "\\", "/", "@", "+", "-",
    "ion_charge", "start", "end", "ring_digit", "%",
    "reserved1", "reserved2", "reserved3",
)
SYMBOL_SLOT = {name: i for i, name in enumerate(SYMBOL_VOCABULARY)}

ATOM_TYPES = ("H", "C", "O", "N", "other")
CHIRALITY_ORDER = (Chirality.R, Chirality.S, Chirality.OTHER)
HYBRIDIZATION_ORDER = tuple(Hybridization)

COL_NUM_H = 5
COL_DEGREE = 6
COL_CHARGE = 7
COL_VALENCE = 8
COL_RING = 9
COL_AROMATIC = 10
COL_CHIRALITY = 11
COL_HYBRIDIZATION = 14


class TooLong(DataError):
    pass


class UnfeaturizableToken(DataError):
    pass


@dataclass
class FeatureMatrix:
    data: np.ndarray
    valid_rows: int
    row_kinds: list[tuple[str, object]]
    row_tokens: list[Token | None]
    source: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.data:
            buf.write(",".join(_fmt(v) for v in row))
            buf.write("\n")
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def data_from_bytes(cls, raw: bytes) -> np.ndarray:
        return np.frombuffer(raw, dtype="<f4").reshape(MAX_LEN, N_FEATURES).copy()


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def atom_feature_row(atom: AtomNode, graph: MolGraph | None = None, index: int | None = None) -> np.ndarray:
    """Feature row of a perceived atom.

    Total valence needs the bond orders, so ``graph`` and ``index`` should be
    given; without them valence falls back to degree + hydrogens.
    """
    row = np.zeros(N_FEATURES, dtype=np.float32)
    row[ATOM_TYPES.index(atom.atom_type)] = 1.0
    row[COL_NUM_H] = atom.implicit_h
    row[COL_DEGREE] = atom.degree
    row[COL_CHARGE] = atom.formal_charge
    if graph is not None and index is not None:
        row[COL_VALENCE] = total_valence(graph, index)
    else:
        row[COL_VALENCE] = atom.degree + atom.implicit_h
    row[COL_RING] = float(atom.in_ring)
    row[COL_AROMATIC] = float(atom.aromatic)
    if atom.chirality is not None:
        row[COL_CHIRALITY + CHIRALITY_ORDER.index(atom.chirality)] = 1.0
    row[COL_HYBRIDIZATION + HYBRIDIZATION_ORDER.index(atom.hybridization)] = 1.0
    return row


def hydrogen_feature_row() -> np.ndarray:
    """Row for the hydrogen count written inside a bracket atom (``H`` of ``[NH4+]``)."""
    row = np.zeros(N_FEATURES, dtype=np.float32)
    row[ATOM_TYPES.index("H")] = 1.0
    row[COL_DEGREE] = 1
    row[COL_VALENCE] = 1
    row[COL_HYBRIDIZATION + HYBRIDIZATION_ORDER.index(Hybridization.S)] = 1.0
    return row


def symbol_slot(symbol: str, kind: str | None = None) -> int:
    """Vocabulary slot of a non-atom token.

    Digits map to ``ring_digit`` unless ``kind`` says they are the magnitude
    of a bracket charge, in which case they map to ``ion_charge``.
    """
    if symbol in SYMBOL_SLOT and not symbol.startswith("reserved"):
        return SYMBOL_SLOT[symbol]
    if kind == "charge_digit" and symbol.isdigit():
        return SYMBOL_SLOT["ion_charge"]
    if kind == "atom_class" or symbol.startswith(":"):
        return SYMBOL_SLOT[":"]
    if kind == "chiral" or symbol.startswith("@"):
        return SYMBOL_SLOT["@"]
    if symbol and symbol.isdigit():
        return SYMBOL_SLOT["ring_digit"]
    raise UnfeaturizableToken(f"symbol {symbol!r} is outside the vocabulary")


def symbol_feature_row(symbol: str, kind: str | None = None) -> np.ndarray:
    row = np.zeros(N_FEATURES, dtype=np.float32)
    row[N_ATOM_FEATURES + symbol_slot(symbol, kind)] = 1.0
    return row


def featurize_smiles(text: str, graph: MolGraph | None = None, max_len: int = MAX_LEN) -> FeatureMatrix:
    """Build the feature matrix of ``text``.

    Raises:
        TooLong: more than ``max_len - 2`` tokens.
        UnfeaturizableToken: a token has no vocabulary slot (e.g. ``$``).
    """
    if graph is None:
        graph = parse_smiles(text)
    elif graph.source != text:
        raise DataError("graph was parsed from a different SMILES string")
    n_rows = len(graph.tokens) + 2
    if n_rows > max_len:
        raise TooLong(f"{len(graph.tokens)} tokens + start/end exceed {max_len} rows")

    data = np.zeros((max_len, N_FEATURES), dtype=np.float32)
    kinds: list[tuple[str, object]] = [("start", None)]
    row_tokens: list[Token | None] = [None]
    data[0] = symbol_feature_row("start")
    for r, tok in enumerate(graph.tokens, start=1):
        if tok.kind == "atom":
            data[r] = atom_feature_row(graph.atoms[tok.atom], graph, tok.atom)
            kinds.append(("atom", tok.atom))
        elif tok.kind == "hydrogen":
            data[r] = hydrogen_feature_row()
            kinds.append(("hydrogen", tok.atom))
        else:
            symbol = tok.text(graph.source)
            slot = symbol_slot(symbol, tok.kind)
            data[r, N_ATOM_FEATURES + slot] = 1.0
            kinds.append(("symbol", SYMBOL_VOCABULARY[slot]))
        row_tokens.append(tok)
    data[n_rows - 1] = symbol_feature_row("end")
    kinds.append(("end", None))
    row_tokens.append(None)
    kinds.extend([("pad", None)] * (max_len - n_rows))
    row_tokens.extend([None] * (max_len - n_rows))
    return FeatureMatrix(data, n_rows, kinds, row_tokens, text)
