from __future__ import annotations

import json

import numpy as np
import pytest

from miattn.chem import parse_smiles
from miattn.errors import IoFailure
from miattn.report import (
    AtomWeightMap,
    RowWeight,
    SourceMismatch,
    extract_attention_weights,
    map_weights_to_atoms,
    normalize,
    ramp_color,
    render_smiles_heatmap,
    row_owners,
)


def test_weights_cover_valid_rows(small_model):
    wm = extract_attention_weights(small_model, "CC(=O)Nc1ccncc1")
    assert wm.valid_rows == len(parse_smiles("CC(=O)Nc1ccncc1").tokens) + 2
    assert all(0 < r.weight < 1 for r in wm.rows)
    assert wm.rows[0].synthetic and wm.rows[-1].synthetic
    assert extract_attention_weights(small_model, "CC(=O)Nc1ccncc1") == wm


def test_single_atom(small_model):
    wm = extract_attention_weights(small_model, "C")
    atoms = map_weights_to_atoms(wm, parse_smiles("C"))
    assert len(atoms) == 1 and atoms[0].weight == wm.rows[1].weight == atoms[0].aggregate


def test_symbol_weight_aggregates_onto_preceding_atom(small_model):
    wm = extract_attention_weights(small_model, "C=O")
    atoms = map_weights_to_atoms(wm, parse_smiles("C=O"))
    w = [r.weight for r in wm.rows]
    assert atoms[0].aggregate == pytest.approx(w[1] + w[2])
    assert atoms[1].aggregate == pytest.approx(w[3])


def test_row_owners_leading_symbol_and_hydrogen():
    rows = [RowWeight(0, "start", None, None, 0.5), RowWeight(1, "symbol", (0, 1), None, 0.1),
            RowWeight(2, "atom", (1, 2), 0, 0.2), RowWeight(3, "hydrogen", (2, 4), 0, 0.3),
            RowWeight(4, "symbol", (4, 5), None, 0.4), RowWeight(5, "end", None, None, 0.5)]
    assert row_owners(AtomWeightMap("[NH4+]", rows, 0.5)) == [None, 0, 0, 0, 0, None]


def test_source_mismatch(small_model):
    wm = extract_attention_weights(small_model, "CCO")
    with pytest.raises(SourceMismatch):
        map_weights_to_atoms(wm, parse_smiles("CCN"))


def test_color_ramp():
    assert normalize([0.3, 0.3]).tolist() == [0.5, 0.5]
    assert normalize([1.0, 2.0, 3.0]).tolist() == [0, 0.5, 1]
    assert ramp_color(1.0) == "#ff0000" and ramp_color(0.0) == "#ffffff"


def _colors(html_text):
    return [part.split(";")[0].split('"')[0] for part in html_text.split("background:")[1:]]


def test_uniform_weights_single_colour():
    rows = [RowWeight(0, "start", None, None, 0.5)] + [
        RowWeight(i + 1, "atom", (i, i + 1), i, 0.7) for i in range(3)] + [RowWeight(4, "end", None, None, 0.5)]
    wm = AtomWeightMap("CCC", rows, 0.4)
    doc = render_smiles_heatmap(wm, map_weights_to_atoms(wm, parse_smiles("CCC")))
    assert len(set(_colors(doc.html))) == 1


def test_heatmap_document(tmp_path, small_model):
    smi = "OC(=O)c1ccccc1Cl"
    wm = extract_attention_weights(small_model, smi)
    atoms = map_weights_to_atoms(wm, parse_smiles(smi))
    path = tmp_path / "x.html"
    doc = render_smiles_heatmap(wm, atoms, path)
    assert path.read_text() == doc.html
    colours = _colors(doc.html)
    assert len(colours) == len(smi) and "#ff0000" in colours
    again = render_smiles_heatmap(extract_attention_weights(small_model, smi), atoms)
    assert again.html == doc.html
    embedded = doc.html.split('id="weights">')[1].split("</script>")[0]
    assert json.loads(embedded.replace("<\\/", "</")) == json.loads(json.dumps(doc.table, sort_keys=True))
    assert len(doc.table["rows"]) == wm.valid_rows
    assert np.isclose(sum(a["weight"] for a in doc.table["atoms"]),
                      sum(r.weight for r in wm.rows if not r.synthetic))


def test_heatmap_write_failure(tmp_path, small_model):
    wm = extract_attention_weights(small_model, "CC")
    atoms = map_weights_to_atoms(wm, parse_smiles("CC"))
    with pytest.raises(IoFailure):
        render_smiles_heatmap(wm, atoms, tmp_path / "missing" / "x.html")
