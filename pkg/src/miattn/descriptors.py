"""Fixed-schema 2D molecular descriptors and a train-fitted standard scaler."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from miattn.chem import BondOrder, Hybridization, MolGraph
from miattn.errors import DataError, SchemaMismatch

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "miattn-2d-v1"
DESCRIPTOR_NAMES = (
    "heavy_atom_count", "mol_weight", "bond_count", "ring_count",
    "aromatic_atom_count", "n_C", "n_N", "n_O", "n_S", "n_halogen",
    "hbd", "hba", "rotatable_bonds", "formal_charge_sum", "max_ring_size",
    "fraction_aromatic", "fraction_csp3", "mean_degree", "zagreb1",
    "wiener_index", "double_bond_count", "triple_bond_count", "hetero_ratio",
    "branch_count",
)

HALOGENS = frozenset(("F", "Cl", "Br", "I"))

# Standard atomic weights (IUPAC, abridged).
ATOMIC_MASS = {
    "H": 1.008, "He": 4.0026, "Li": 6.94, "Be": 9.0122, "B": 10.81,
    "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998, "Ne": 20.180,
    "Na": 22.990, "Mg": 24.305, "Al": 26.982, "Si": 28.085, "P": 30.974,
    "S": 32.06, "Cl": 35.45, "Ar": 39.948, "K": 39.098, "Ca": 40.078,
    "Sc": 44.956, "Ti": 47.867, "V": 50.942, "Cr": 51.996, "Mn": 54.938,
    "Fe": 55.845, "Co": 58.933, "Ni": 58.693, "Cu": 63.546, "Zn": 65.38,
    "Ga": 69.723, "Ge": 72.630, "As": 74.922, "Se": 78.971, "Br": 79.904,
    "Kr": 83.798, "Rb": 85.468, "Sr": 87.62, "Y": 88.906, "Zr": 91.224,
    "Nb": 92.906, "Mo": 95.95, "Ru": 101.07, "Rh": 102.91, "Pd": 106.42,
    "Ag": 107.87, "Cd": 112.41, "In": 114.82, "Sn": 118.71, "Sb": 121.76,
    "Te": 127.60, "I": 126.90, "Xe": 131.29, "Cs": 132.91, "Ba": 137.33,
    "La": 138.91, "Ce": 140.12, "Gd": 157.25, "Hf": 178.49, "Ta": 180.95,
    "W": 183.84, "Re": 186.21, "Os": 190.23, "Ir": 192.22, "Pt": 195.08,
    "Au": 196.97, "Hg": 200.59, "Tl": 204.38, "Pb": 207.2, "Bi": 208.98,
}


@dataclass(frozen=True)
class DescriptorVector:
    values: np.ndarray
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if len(self.values) != len(DESCRIPTOR_NAMES):
            raise SchemaMismatch(f"expected {len(DESCRIPTOR_NAMES)} values, got {len(self.values)}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(DESCRIPTOR_NAMES, (float(v) for v in self.values)))


def _heavy_adjacency(g: MolGraph) -> dict[int, list[int]]:
    heavy = [i for i, a in enumerate(g.atoms) if a.element != "H"]
    keep = set(heavy)
    return {i: [j for j in g.neighbors(i) if j in keep] for i in heavy}


def _bfs_distances(adj: dict[int, list[int]], source: int, skip_edge: tuple[int, int] | None = None) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if skip_edge is not None and {u, v} == set(skip_edge):
                continue
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def compute_descriptors(g: MolGraph) -> DescriptorVector:
    atoms = g.atoms
    adj = _heavy_adjacency(g)
    heavy = sorted(adj)
    n_heavy = len(heavy)
    heavy_bonds = [bd for bd in g.bonds if bd.a in adj and bd.b in adj]
    deg = {i: len(adj[i]) for i in heavy}

    total_h = sum(a.implicit_h for a in atoms)
    mol_weight = total_h * ATOMIC_MASS["H"]
    for a in atoms:
        if a.element in ATOMIC_MASS:
            mol_weight += ATOMIC_MASS[a.element]
        elif a.element != "*":
            logger.warning("no atomic mass for %s; counted as 0", a.element)

    count = lambda *els: sum(1 for i in heavy if atoms[i].element in els)  # noqa: E731
    n_c = count("C")
    n_aromatic = sum(1 for i in heavy if atoms[i].aromatic)

    # cyclomatic number E - V + components on the heavy-atom graph
    seen: set[int] = set()
    components = 0
    for i in heavy:
        if i not in seen:
            components += 1
            seen.update(_bfs_distances(adj, i))
    ring_count = len(heavy_bonds) - n_heavy + components

    rotatable = sum(
        1 for bd in heavy_bonds
        if bd.order is BondOrder.SINGLE and not bd.in_ring and deg[bd.a] > 1 and deg[bd.b] > 1
    )

    max_ring = 0
    for bd in heavy_bonds:
        if bd.in_ring:
            d = _bfs_distances(adj, bd.a, skip_edge=(bd.a, bd.b)).get(bd.b)
            if d is not None:
                max_ring = max(max_ring, d + 1)

    wiener = 0
    for i in heavy:
        dist = _bfs_distances(adj, i)
        wiener += sum(d for j, d in dist.items() if j > i)

    csp3 = sum(1 for i in heavy if atoms[i].element == "C" and atoms[i].hybridization is Hybridization.SP3)
    values = [
        n_heavy,
        mol_weight,
        len(heavy_bonds),
        ring_count,
        n_aromatic,
        n_c,
        count("N"),
        count("O"),
        count("S"),
        sum(1 for i in heavy if atoms[i].element in HALOGENS),
        sum(1 for i in heavy if atoms[i].element in ("N", "O") and atoms[i].implicit_h > 0),
        count("N", "O"),
        rotatable,
        sum(a.formal_charge for a in atoms),
        max_ring,
        n_aromatic / n_heavy if n_heavy else 0.0,
        csp3 / n_c if n_c else 0.0,
        sum(deg.values()) / n_heavy if n_heavy else 0.0,
        sum(d * d for d in deg.values()),
        wiener,
        sum(1 for bd in heavy_bonds if bd.order is BondOrder.DOUBLE),
        sum(1 for bd in heavy_bonds if bd.order is BondOrder.TRIPLE),
        sum(1 for i in heavy if atoms[i].element not in ("C", "*")) / n_heavy if n_heavy else 0.0,
        sum(1 for i in heavy if deg[i] >= 3),
    ]
    return DescriptorVector(np.asarray(values, dtype=np.float64))


class InsufficientData(DataError):
    pass


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature mean/std fitted on training vectors; ``mask`` marks kept features."""

    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray
    schema_version: str = SCHEMA_VERSION

    @property
    def n_kept(self) -> int:
        return int(self.mask.sum())

    def kept_names(self) -> list[str]:
        return [n for n, keep in zip(DESCRIPTOR_NAMES, self.mask) if keep]


def _as_matrix(vectors: Sequence[DescriptorVector] | np.ndarray) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors).astype(np.float64)
    return np.stack([v.values for v in vectors]).astype(np.float64)


def fit_scaler(train_vectors: Sequence[DescriptorVector] | np.ndarray) -> ScalerParams:
    """Fit population mean and std per feature, masking constant features."""
    x = _as_matrix(train_vectors)
    if x.shape[0] < 2:
        raise InsufficientData("need at least two vectors to fit a scaler")
    x = np.where(np.isfinite(x), x, np.nan)
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(x, axis=0)
        std = np.nanstd(x, axis=0)
        spread = np.nanmax(x, axis=0) - np.nanmin(x, axis=0)
    # compare the range, not std: a constant column can pick up a rounding-level std
    mask = np.isfinite(std) & (spread > 0) & (std > 0)
    mean = np.where(mask, mean, 0.0)
    std = np.where(mask, std, 1.0)
    return ScalerParams(mean, std, mask)


def apply_scaler(v: DescriptorVector | np.ndarray, s: ScalerParams) -> np.ndarray:
    """Standardize one vector or a stack of raw descriptor rows.

    Masked features are dropped. Non-finite inputs become 0, the training
    mean on the scaled axis.
    """
    if isinstance(v, DescriptorVector):
        if v.schema_version != s.schema_version:
            raise SchemaMismatch(f"vector schema {v.schema_version} != scaler schema {s.schema_version}")
        x = v.values[None, :]
        single = True
    else:
        x = np.asarray(v, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
    if x.shape[1] != len(s.mean):
        raise SchemaMismatch(f"expected {len(s.mean)} descriptor columns, got {x.shape[1]}")
    z = (x - s.mean) / s.std
    bad = ~np.isfinite(z)
    if bad.any():
        logger.warning("imputed %d non-finite descriptor value(s) to 0", int(bad[:, s.mask].sum()))
        z[bad] = 0.0
    z = z[:, s.mask]
    return z[0] if single else z
