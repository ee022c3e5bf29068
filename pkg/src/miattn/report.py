"""Per-token and per-atom attention weights, plus a character heatmap of the SMILES."""

from __future__ import annotations

import html
import json
import os
from dataclasses import dataclass

import numpy as np

from miattn.chem import MolGraph, parse_smiles
from miattn.descriptors import apply_scaler, compute_descriptors
from miattn.errors import DataError, IoFailure
from miattn.featurize import featurize_smiles
from miattn.model import MultiInputModel


class SourceMismatch(DataError):
    pass


@dataclass(frozen=True)
class RowWeight:
    index: int
    kind: str
    span: tuple[int, int] | None
    atom: int | None
    weight: float

    @property
    def synthetic(self) -> bool:
        return self.span is None


@dataclass
class AtomWeightMap:
    smiles: str
    rows: list[RowWeight]
    probability: float

    @property
    def valid_rows(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class AtomWeight:
    id: int
    element: str
    weight: float
    aggregate: float


def extract_attention_weights(model: MultiInputModel, smiles: str) -> AtomWeightMap:
    """Run the model in eval mode and pair every non-pad attention weight with its token.

    Start and end rows carry no source span and are marked synthetic.
    """
    if model.scaler is None:
        raise SourceMismatch("model has no fitted descriptor scaler")
    g = parse_smiles(smiles)
    fm = featurize_smiles(smiles, g, max_len=model.config.max_len)
    desc = apply_scaler(compute_descriptors(g).values, model.scaler)
    out = model.forward(fm.data[None], np.atleast_2d(desc), train=False)
    a = out.a[0]
    rows = []
    for i in range(fm.valid_rows):
        kind = fm.row_kinds[i][0]
        tok = fm.row_tokens[i]
        span = None if tok is None else (tok.start, tok.end)
        atom = tok.atom if tok is not None and kind in ("atom", "hydrogen") else None
        rows.append(RowWeight(i, kind, span, atom, float(a[i])))
    return AtomWeightMap(g.source, rows, float(out.probability[0]))


def row_owners(m: AtomWeightMap) -> list[int | None]:
    """Atom each row aggregates onto.

    Atom and bracket-hydrogen rows belong to their atom; symbol rows attach to
    the closest preceding atom row, or the first atom row when none precedes.
    Start and end rows belong to no atom.
    """
    owners: list[int | None] = []
    last: int | None = None
    pending: list[int] = []
    for r in m.rows:
        if r.synthetic:
            owners.append(None)
        elif r.atom is not None:
            last = r.atom
            for k in pending:
                owners[k] = last
            pending.clear()
            owners.append(r.atom)
        else:
            if last is None:
                pending.append(len(owners))
            owners.append(last)
    return owners


def map_weights_to_atoms(m: AtomWeightMap, g: MolGraph) -> list[AtomWeight]:
    if m.smiles != g.source:
        raise SourceMismatch(f"weight map is for {m.smiles!r} but graph is for {g.source!r}")
    own = {r.atom: r.weight for r in m.rows if r.kind == "atom"}
    if set(own) != set(range(len(g.atoms))):
        raise SourceMismatch("weight map atoms do not match the graph")
    totals = dict.fromkeys(range(len(g.atoms)), 0.0)
    for r, owner in zip(m.rows, row_owners(m)):
        if owner is not None:
            totals[owner] += r.weight
    return [AtomWeight(i, a.element, own[i], totals[i]) for i, a in enumerate(g.atoms)]


def normalize(values) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def ramp_color(level: float) -> str:
    """White (0) to red (1)."""
    fade = int(round(255 * (1.0 - float(level))))
    return f"#ff{fade:02x}{fade:02x}"


@dataclass
class HeatmapDoc:
    html: str
    table: dict


def weight_table(m: AtomWeightMap, atoms: list[AtomWeight]) -> dict:
    return {
        "smiles": m.smiles,
        "probability": m.probability,
        "rows": [
            {"index": r.index, "char_span": None if r.span is None else list(r.span),
             "kind": r.kind, "atom": r.atom, "weight": r.weight, "synthetic": r.synthetic}
            for r in m.rows
        ],
        "atoms": [{"id": a.id, "element": a.element, "weight": a.aggregate, "row_weight": a.weight}
                  for a in atoms],
    }


_PAGE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 2em; }}
.smiles {{ font-family: monospace; font-size: 28px; letter-spacing: 1px; }}
.smiles span {{ padding: 2px 0; }}
table {{ border-collapse: collapse; margin-top: 1.5em; font-size: 13px; }}
td, th {{ border: 1px solid #ccc; padding: 2px 8px; text-align: right; }}
</style></head>
<body>
<h1>{title}</h1>
<p>Predicted probability: {prob:.4f}. Colour runs from white (lowest weight in this molecule) to red (highest).</p>
<div class="smiles">{chars}</div>
<table><tr><th>atom</th><th>element</th><th>weight</th><th>aggregate</th></tr>
{atom_rows}
</table>
<script type="application/json" id="weights">{table}</script>
</body></html>
"""


def render_smiles_heatmap(m: AtomWeightMap, atoms: list[AtomWeight], out_path=None) -> HeatmapDoc:
    """Colour each SMILES character by the weight of the token that contains it."""
    if not m.rows:
        raise SourceMismatch("empty weight map")
    real = [r for r in m.rows if not r.synthetic]
    levels = normalize([r.weight for r in real]) if real else np.array([])
    char_level = [0.0] * len(m.smiles)
    for r, lvl in zip(real, levels):
        for k in range(*r.span):
            char_level[k] = float(lvl)
    chars = "".join(
        f'<span style="background:{ramp_color(lvl)}" title="{lvl:.3f}">{html.escape(ch)}</span>'
        for ch, lvl in zip(m.smiles, char_level)
    )
    atom_rows = "\n".join(
        f"<tr><td>{a.id}</td><td>{html.escape(a.element)}</td><td>{a.weight:.6f}</td><td>{a.aggregate:.6f}</td></tr>"
        for a in atoms
    )
    table = weight_table(m, atoms)
    # "</" inside an inline script would end it early
    table_json = json.dumps(table, sort_keys=True).replace("</", "<\\/")
    doc = _PAGE.format(title=html.escape(m.smiles), prob=m.probability, chars=chars,
                       atom_rows=atom_rows, table=table_json)
    if out_path is not None:
        try:
            with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(doc)
        except OSError as exc:
            raise IoFailure(f"cannot write {os.fspath(out_path)}: {exc}") from exc
    return HeatmapDoc(doc, table)
