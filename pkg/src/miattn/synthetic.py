"""Random small molecules labelled by whether they contain an aromatic nitrogen.

Negatives deliberately include nitrogen in non-aromatic form (amines, amides,
nitriles, piperidine, aniline) and aromatic rings without nitrogen, so that
neither "has N" nor "is aromatic" alone predicts the label.
"""

from __future__ import annotations

import numpy as np

from miattn.chem import MolGraph, parse_smiles
from miattn.training import Dataset, Record

# ring templates; ``{r}`` and ``{s}`` (fused rings) become ring-closure digits
_AROMATIC_N = (
    "c{r}ccncc{r}", "c{r}cnncc{r}", "c{r}cc[nH]c{r}", "c{r}nc[nH]c{r}", "c{r}ncncc{r}",
    "c{r}ccc{s}ncccc{s}c{r}", "c{r}cnoc{r}", "c{r}scnc{r}",
)
_OTHER_RINGS = (
    "c{r}ccccc{r}", "c{r}ccoc{r}", "c{r}ccsc{r}", "C{r}CCNCC{r}", "C{r}CCCCC{r}", "C{r}CCOC{r}",
    "C{r}CC{r}", "C{r}CCN(C)CC{r}", "c{r}ccc{s}ccccc{s}c{r}",
)
_LINKERS = ("", "C", "CC", "O", "N", "C(=O)N", "NC(=O)", "S", "CO", "C=C", "C(C)")
_HEADS = ("", "C", "CC", "CCC", "F", "Cl", "Br", "O", "N", "N#C", "FC(F)(F)", "OC(=O)", "CO", "CN(C)")
_TAILS = ("", "C", "CC", "CCC", "F", "Cl", "Br", "O", "N", "C#N", "C(F)(F)F", "C(=O)O", "OC", "N(C)C")


def has_aromatic_nitrogen(g: MolGraph) -> bool:
    return any(a.element == "N" and a.aromatic for a in g.atoms)


def _molecule(rng: np.random.Generator, want_positive: bool) -> str:
    n_rings = int(rng.integers(1, 4))
    positive_slot = int(rng.integers(n_rings)) if want_positive else -1
    parts = [_HEADS[rng.integers(len(_HEADS))]]
    for i in range(n_rings):
        pool = _AROMATIC_N if i == positive_slot else _OTHER_RINGS
        ring = pool[rng.integers(len(pool))].replace("{r}", str(i + 1)).replace("{s}", str(i + 5))
        if i:
            parts.append(_LINKERS[rng.integers(len(_LINKERS))])
        parts.append(ring)
    parts.append(_TAILS[rng.integers(len(_TAILS))])
    return "".join(parts)


def generate_motif_dataset(n: int, seed: int = 0, positive_fraction: float = 0.5) -> Dataset:
    """``n`` distinct molecules; labels come from the parsed graph, not the template."""
    rng = np.random.default_rng(seed)
    n_pos = int(round(positive_fraction * n))
    want = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(want)
    seen: set[str] = set()
    records: list[Record] = []
    for target in want:
        while True:
            smi = _molecule(rng, bool(target))
            if smi in seen:
                continue
            label = int(has_aromatic_nitrogen(parse_smiles(smi)))
            if label == target:
                break
        seen.add(smi)
        records.append(Record(f"syn{len(records):05d}", smi, label))
    return Dataset(records)


def overfit_set(seed: int = 64) -> Dataset:
    """The fixed 64-molecule set used for memorisation checks."""
    return generate_motif_dataset(64, seed=seed)


def write_dataset_csv(ds: Dataset, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "smiles", "label"])
        for r in ds.records:
            w.writerow([r.id, r.smiles, r.label])
