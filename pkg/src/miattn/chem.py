"""SMILES parsing and atom perception.

The parser turns a SMILES string into a :class:`MolGraph` whose atoms carry
the per-atom properties used by the feature matrix: element, hydrogen count,
charge, ring membership, aromaticity, chirality tag and hybridization.

Lowercase aromatic notation is trusted; Kekule input is not aromatized and
no canonicalization is performed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum

from miattn.errors import DataError

ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I
    Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au
    Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db
    Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)

# Daylight default valences for the organic subset.
DEFAULT_VALENCE = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
    "F": 1, "Cl": 1, "Br": 1, "I": 1,
}

ORGANIC_ALIPHATIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
ORGANIC_AROMATIC = ("b", "c", "n", "o", "p", "s")
BRACKET_AROMATIC = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

# Main-group elements for which the bond-pattern hybridization rules apply.
HYBRIDIZABLE = frozenset("B C N O F Si P S Cl Ge As Se Br Sn Sb Te I".split())


class Chirality(str, Enum):
    R = "R"
    S = "S"
    OTHER = "other"


class Hybridization(str, Enum):
    S = "s"
    SP = "sp"
    SP2 = "sp2"
    SP3 = "sp3"
    SP3D = "sp3d"
    SP3D2 = "sp3d2"
    OTHER = "other"


class BondOrder(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    QUADRUPLE = "quadruple"
    AROMATIC = "aromatic"

    @property
    def value_order(self) -> float:
        return _BOND_ORDER_VALUE[self]


_BOND_ORDER_VALUE = {
    BondOrder.SINGLE: 1.0,
    BondOrder.DOUBLE: 2.0,
    BondOrder.TRIPLE: 3.0,
    BondOrder.QUADRUPLE: 4.0,
    BondOrder.AROMATIC: 1.5,
}

_EXTENDED_CHIRAL = re.compile(r"@(?:TH|AL|SP|TB|OH)\d{1,2}")

_BOND_SYMBOLS = {
    "-": BondOrder.SINGLE,
    "/": BondOrder.SINGLE,
    "\\": BondOrder.SINGLE,
    "=": BondOrder.DOUBLE,
    "#": BondOrder.TRIPLE,
    "$": BondOrder.QUADRUPLE,
    ":": BondOrder.AROMATIC,
}


# --------------------------------------------------------------------------
# Errors


class SmilesError(DataError):
    """A SMILES string was rejected. ``offset`` is the offending character."""

    def __init__(self, message: str, text: str = "", offset: int | None = None):
        self.text = text
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class EmptyInput(SmilesError):
    pass


class UnmatchedBranch(SmilesError):
    pass


class UnpairedRingClosure(SmilesError):
    pass


class UnknownToken(SmilesError):
    pass


class UnclosedBracket(SmilesError):
    pass


class InvalidBond(SmilesError):
    """Dangling, doubled, self-referencing or duplicate bond."""


# --------------------------------------------------------------------------
# Graph types


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    offset: int | None = None


@dataclass
class AtomNode:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_bonds: list[int] = field(default_factory=list)
    implicit_h: int = 0
    in_ring: bool = False
    chirality: Chirality | None = None
    hybridization: Hybridization = Hybridization.OTHER
    token_index: int = 0
    bracket: bool = False
    bracket_h: int | None = None
    isotope: int | None = None

    @property
    def atom_type(self) -> str:
        """One of ``H``, ``C``, ``O``, ``N`` or ``other``."""
        return self.element if self.element in ("H", "C", "O", "N") else "other"

    @property
    def degree(self) -> int:
        return len(self.explicit_bonds)


@dataclass
class BondEdge:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE
    in_ring: bool = False
    explicit: bool = False

    def other(self, atom: int) -> int:
        return self.b if atom == self.a else self.a


@dataclass(frozen=True)
class Token:
    """A contiguous span of the source string.

    ``atom`` is the atom the token belongs to: the atom itself for ``atom``
    tokens, the owning atom for ``hydrogen`` tokens, otherwise ``None``.
    """

    start: int
    end: int
    kind: str
    atom: int | None = None

    def text(self, source: str) -> str:
        return source[self.start:self.end]


TOKEN_KINDS = (
    "atom", "hydrogen", "bond", "branch", "ring", "ring_percent", "bracket",
    "charge", "charge_digit", "chiral", "dot", "atom_class",
)


@dataclass
class MolGraph:
    atoms: list[AtomNode]
    bonds: list[BondEdge]
    source: str
    tokens: list[Token]
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def token_map(self) -> list[str]:
        """Token kind of every character of ``source``."""
        kinds: list[str] = []
        for tok in self.tokens:
            kinds.extend([tok.kind] * (tok.end - tok.start))
        return kinds

    def neighbors(self, atom: int) -> list[int]:
        return [self.bonds[b].other(atom) for b in self.atoms[atom].explicit_bonds]

    def bond_order_sum(self, atom: int) -> float:
        return sum(self.bonds[b].order.value_order for b in self.atoms[atom].explicit_bonds)

    def n_components(self) -> int:
        seen: set[int] = set()
        count = 0
        for start in range(len(self.atoms)):
            if start in seen:
                continue
            count += 1
            stack = [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                for v in self.neighbors(u):
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
        return count


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, text: str):
        self.s = text
        self.n = len(text)
        self.i = 0
        self.atoms: list[AtomNode] = []
        self.bonds: list[BondEdge] = []
        self.tokens: list[Token] = []
        self.diagnostics: list[Diagnostic] = []
        self.bond_index: dict[tuple[int, int], int] = {}
        self.prev: int | None = None
        self.pending: tuple[BondOrder, int] | None = None
        self.branches: list[tuple[int, int]] = []
        # ring number -> (atom, bond order or None, offset of the digit)
        self.rings: dict[int, tuple[int, BondOrder | None, int]] = {}

    def error(self, cls: type[SmilesError], message: str, offset: int | None) -> SmilesError:
        return cls(message, self.s, offset)

    def emit(self, start: int, end: int, kind: str, atom: int | None = None) -> None:
        self.tokens.append(Token(start, end, kind, atom))

    def run(self) -> MolGraph:
        s = self.s
        while self.i < self.n:
            ch = s[self.i]
            if ch == "(":
                if self.prev is None:
                    raise self.error(UnmatchedBranch, "branch opened before any atom", self.i)
                if self.pending is not None:
                    raise self.error(InvalidBond, "bond symbol before '('", self.pending[1])
                self.branches.append((self.prev, self.i))
                self.emit(self.i, self.i + 1, "branch")
                self.i += 1
            elif ch == ")":
                if not self.branches:
                    raise self.error(UnmatchedBranch, "')' without matching '('", self.i)
                if self.pending is not None:
                    raise self.error(InvalidBond, "dangling bond before ')'", self.pending[1])
                self.prev = self.branches.pop()[0]
                self.emit(self.i, self.i + 1, "branch")
                self.i += 1
            elif ch in _BOND_SYMBOLS:
                if self.prev is None:
                    raise self.error(InvalidBond, "bond without a preceding atom", self.i)
                if self.pending is not None:
                    raise self.error(InvalidBond, "two consecutive bond symbols", self.i)
                self.pending = (_BOND_SYMBOLS[ch], self.i)
                self.emit(self.i, self.i + 1, "bond")
                self.i += 1
            elif ch == ".":
                if self.pending is not None:
                    raise self.error(InvalidBond, "bond symbol before '.'", self.pending[1])
                self.prev = None
                self.emit(self.i, self.i + 1, "dot")
                self.i += 1
            elif ch.isdigit() or ch == "%":
                self.ring_closure()
            elif ch == "[":
                self.bracket_atom()
            else:
                self.organic_atom()

        if self.branches:
            raise self.error(UnmatchedBranch, "unclosed '('", self.branches[-1][1])
        if self.rings:
            offset = min(pos for _, _, pos in self.rings.values())
            raise self.error(UnpairedRingClosure, "ring closure never closed", offset)
        if self.pending is not None:
            raise self.error(InvalidBond, "dangling bond at end of input", self.pending[1])
        return MolGraph(self.atoms, self.bonds, self.s, self.tokens, self.diagnostics)

    def add_atom(self, atom: AtomNode) -> int:
        idx = len(self.atoms)
        self.atoms.append(atom)
        if self.prev is not None:
            order, explicit = None, False
            if self.pending is not None:
                order, explicit = self.pending[0], True
            self.add_bond(self.prev, idx, order, explicit, atom.token_index)
        self.pending = None
        self.prev = idx
        return idx

    def add_bond(self, a: int, b: int, order: BondOrder | None, explicit: bool, offset: int) -> None:
        if a == b:
            raise self.error(InvalidBond, "atom bonded to itself", offset)
        key = (min(a, b), max(a, b))
        if key in self.bond_index:
            raise self.error(InvalidBond, "duplicate bond between the same atoms", offset)
        if order is None:
            both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        self.bond_index[key] = len(self.bonds)
        self.atoms[a].explicit_bonds.append(len(self.bonds))
        self.atoms[b].explicit_bonds.append(len(self.bonds))
        self.bonds.append(BondEdge(a, b, order, explicit=explicit))

    def organic_atom(self) -> None:
        s, i = self.s, self.i
        for sym in ORGANIC_ALIPHATIC:
            if s.startswith(sym, i):
                self.i += len(sym)
                idx = self.add_atom(AtomNode(sym, token_index=i))
                self.emit(i, self.i, "atom", idx)
                return
        ch = s[i]
        if ch in ORGANIC_AROMATIC:
            self.i += 1
            idx = self.add_atom(AtomNode(ch.upper(), aromatic=True, token_index=i))
            self.emit(i, self.i, "atom", idx)
            return
        if ch == "*":
            self.i += 1
            idx = self.add_atom(AtomNode("*", token_index=i))
            self.emit(i, self.i, "atom", idx)
            return
        raise self.error(UnknownToken, f"unexpected character {ch!r}", i)

    def ring_closure(self) -> None:
        s, start = self.s, self.i
        if self.prev is None:
            raise self.error(UnpairedRingClosure, "ring closure without a preceding atom", start)
        if s[start] == "%":
            digits = s[start + 1:start + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise self.error(UnknownToken, "'%' must be followed by two digits", start)
            number = int(digits)
            self.emit(start, start + 1, "ring_percent")
            self.emit(start + 1, start + 3, "ring")
            self.i += 3
        else:
            number = int(s[start])
            self.emit(start, start + 1, "ring")
            self.i += 1
        order = self.pending[0] if self.pending is not None else None
        self.pending = None
        if number in self.rings:
            other, other_order, _ = self.rings.pop(number)
            if order is not None and other_order is not None and order != other_order:
                raise self.error(InvalidBond, "conflicting ring-closure bond orders", start)
            use = order if order is not None else other_order
            self.add_bond(other, self.prev, use, use is not None, start)
        else:
            self.rings[number] = (self.prev, order, start)

    def bracket_atom(self) -> None:
        s, open_at = self.s, self.i
        close = s.find("]", open_at + 1)
        if close < 0:
            raise self.error(UnclosedBracket, "'[' without matching ']'", open_at)
        self.emit(open_at, open_at + 1, "bracket")
        pending_tokens: list[tuple[int, int, str]] = []
        i = open_at + 1

        # isotope + element symbol form the atom token
        atom_start = i
        while i < close and s[i].isdigit():
            i += 1
        isotope = int(s[atom_start:i]) if i > atom_start else None
        symbol, aromatic = None, False
        if i < close and s[i] == "*":
            symbol = "*"
            i += 1
        else:
            for sym in BRACKET_AROMATIC:
                if s.startswith(sym, i) and i + len(sym) <= close:
                    symbol, aromatic = sym.capitalize(), True
                    i += len(sym)
                    break
            else:
                two = s[i:i + 2]
                if i + 2 <= close and two in ELEMENTS:
                    symbol = two
                    i += 2
                elif i < close and s[i] in ELEMENTS:
                    symbol = s[i]
                    i += 1
        if symbol is None:
            raise self.error(UnknownToken, "bracket atom without an element symbol", i)
        atom_end = i

        chirality = None
        if s.startswith("@@", i) and i + 2 <= close:
            chirality = Chirality.R
            pending_tokens += [(i, i + 1, "chiral"), (i + 1, i + 2, "chiral")]
            i += 2
        elif i < close and s[i] == "@":
            m = _EXTENDED_CHIRAL.match(s, i, close)
            j = m.end() if m else i + 1
            chirality = Chirality.OTHER if m else Chirality.S
            pending_tokens.append((i, j, "chiral"))
            i = j

        hcount = 0
        if i < close and s[i] == "H":
            j = i + 1
            while j < close and s[j].isdigit():
                j += 1
            hcount = int(s[i + 1:j]) if j > i + 1 else 1
            pending_tokens.append((i, j, "hydrogen"))
            i = j

        charge = 0
        if i < close and s[i] in "+-":
            sign = 1 if s[i] == "+" else -1
            j = i
            while j < close and s[j] == s[i]:
                pending_tokens.append((j, j + 1, "charge"))
                j += 1
            repeats = j - i
            k = j
            while k < close and s[k].isdigit():
                k += 1
            if k > j:
                if repeats > 1:
                    raise self.error(UnknownToken, "charge digits after repeated sign", j)
                pending_tokens.append((j, k, "charge_digit"))
                charge = sign * int(s[j:k])
            else:
                charge = sign * repeats
            i = k

        if i < close and s[i] == ":":
            j = i + 1
            while j < close and s[j].isdigit():
                j += 1
            if j == i + 1:
                raise self.error(UnknownToken, "atom class without digits", i)
            pending_tokens.append((i, j, "atom_class"))
            i = j

        if i != close:
            raise self.error(UnknownToken, f"unexpected character {s[i]!r} in bracket atom", i)

        atom = AtomNode(
            symbol, aromatic=aromatic, formal_charge=charge, chirality=chirality,
            token_index=atom_start, bracket=True, bracket_h=hcount, isotope=isotope,
        )
        idx = self.add_atom(atom)
        self.emit(atom_start, atom_end, "atom", idx)
        for start, end, kind in pending_tokens:
            self.emit(start, end, kind, idx if kind == "hydrogen" else None)
        self.emit(close, close + 1, "bracket")
        text = s[open_at:close + 1]
        if isotope is not None:
            self.diagnostics.append(Diagnostic("isotope-ignored", f"isotope of {text} ignored", open_at))
        if symbol not in DEFAULT_VALENCE and symbol not in ("H", "*"):
            self.diagnostics.append(Diagnostic("exotic-atom", f"{text} typed as 'other'", open_at))
        self.i = close + 1


def parse_smiles(text: str | bytes) -> MolGraph:
    """Parse ``text`` into a fully perceived :class:`MolGraph`.

    Ring membership, implicit hydrogens and hybridization are all computed
    before returning.

    Raises:
        EmptyInput, UnmatchedBranch, UnpairedRingClosure, UnknownToken,
        UnclosedBracket, InvalidBond: all subclasses of :class:`SmilesError`.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError as exc:
            raise UnknownToken("non-ASCII byte", "", exc.start) from None
    if not text:
        raise EmptyInput("empty SMILES string", text, None)
    for pos, ch in enumerate(text):
        if not ch.isascii() or not ch.isprintable() or ch.isspace():
            raise UnknownToken(f"unexpected character {ch!r}", text, pos)
    g = _Parser(text).run()
    g = compute_ring_membership(g)
    g = _settle_aromaticity(g)
    g = compute_implicit_hydrogens(g)
    return infer_hybridization(g)


# --------------------------------------------------------------------------
# Perception


def _bridges(g: MolGraph) -> set[int]:
    """Bond ids that are bridges (lie on no cycle), via iterative Tarjan lowlink."""
    n = len(g.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # frames: (atom, bond used to enter it, iterator over incident bonds)
        stack = [(root, -1, iter(g.atoms[root].explicit_bonds))]
        while stack:
            u, via, it = stack[-1]
            advanced = False
            for b in it:
                if b == via:
                    continue
                v = g.bonds[b].other(u)
                if disc[v] < 0:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, b, iter(g.atoms[v].explicit_bonds)))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[u])
                if low[u] > disc[parent]:
                    bridges.add(via)
    return bridges


def compute_ring_membership(g: MolGraph) -> MolGraph:
    """Flag every atom and bond lying on at least one cycle.

    A bond is on a cycle exactly when it is not a bridge; an atom is on a
    cycle when one of its bonds is.
    """
    bridges = _bridges(g)
    bonds = [replace(bd, in_ring=i not in bridges) for i, bd in enumerate(g.bonds)]
    atoms = [
        replace(a, explicit_bonds=list(a.explicit_bonds),
                in_ring=any(bonds[b].in_ring for b in a.explicit_bonds))
        for a in g.atoms
    ]
    return replace(g, atoms=atoms, bonds=bonds, diagnostics=list(g.diagnostics))


def _settle_aromaticity(g: MolGraph) -> MolGraph:
    """Enforce aromatic => in ring on lowercase atoms and implicit bonds."""
    atoms = list(g.atoms)
    bonds = list(g.bonds)
    diagnostics = list(g.diagnostics)
    for i, a in enumerate(atoms):
        if a.aromatic and not a.in_ring:
            atoms[i] = replace(a, aromatic=False)
            diagnostics.append(Diagnostic("aromatic-outside-ring",
                                          f"aromatic atom {a.element} is not in a ring", a.token_index))
    for i, bd in enumerate(bonds):
        if bd.order is BondOrder.AROMATIC and not bd.explicit and not bd.in_ring:
            bonds[i] = replace(bd, order=BondOrder.SINGLE)
    return replace(g, atoms=atoms, bonds=bonds, diagnostics=diagnostics)


def _single_order_sum(g: MolGraph, atom: int) -> int:
    return sum(1 if b.order is BondOrder.AROMATIC else int(b.order.value_order)
               for b in g.bonds if atom in (b.a, b.b))


def compute_implicit_hydrogens(g: MolGraph) -> MolGraph:
    """Assign hydrogen counts.

    Bracket atoms keep their written H count. Organic-subset atoms get
    ``default_valence - ceil(bond order sum)``; aromatic bonds count 1.5.
    A negative result is clamped to zero. It is recorded as a diagnostic only
    when the atom is over-bonded even with aromatic bonds counted as single,
    so ring-fusion carbons and thiophene-type heteroatoms stay silent.
    """
    atoms = []
    diagnostics = list(g.diagnostics)
    for idx, a in enumerate(g.atoms):
        if a.bracket:
            h = a.bracket_h or 0
        elif a.element in DEFAULT_VALENCE:
            used = math.ceil(g.bond_order_sum(idx))
            h = DEFAULT_VALENCE[a.element] - used
            if h < 0 and _single_order_sum(g, idx) > DEFAULT_VALENCE[a.element]:
                diagnostics.append(Diagnostic(
                    "valence-exceeded",
                    f"{a.element} has bond order sum {used} above default valence "
                    f"{DEFAULT_VALENCE[a.element]}",
                    a.token_index,
                ))
            h = max(h, 0)
        else:
            h = 0
        atoms.append(replace(a, implicit_h=h))
    return replace(g, atoms=atoms, diagnostics=diagnostics)


def infer_hybridization(g: MolGraph) -> MolGraph:
    atoms = []
    for idx, a in enumerate(g.atoms):
        orders = [g.bonds[b].order for b in a.explicit_bonds]
        if a.element == "H":
            hyb = Hybridization.S
        elif a.element not in HYBRIDIZABLE:
            hyb = Hybridization.OTHER
        elif BondOrder.TRIPLE in orders or orders.count(BondOrder.DOUBLE) >= 2:
            hyb = Hybridization.SP
        elif a.aromatic or orders.count(BondOrder.DOUBLE) == 1:
            hyb = Hybridization.SP2
        else:
            steric = len(orders) + a.implicit_h
            if steric == 5:
                hyb = Hybridization.SP3D
            elif steric >= 6:
                hyb = Hybridization.SP3D2
            else:
                hyb = Hybridization.SP3
        atoms.append(replace(a, hybridization=hyb))
    return replace(g, atoms=atoms)


def total_valence(g: MolGraph, atom: int) -> int:
    return math.ceil(g.bond_order_sum(atom)) + g.atoms[atom].implicit_h
