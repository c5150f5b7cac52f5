import numpy as np
import pytest

from miae.errors import ParseError
from miae.structure_io import (ProteinBackbone, format_pdb, load_backbones, parse_backbone,
                               passes_plddt_filter, read_pdb, save_backbones, write_pdb)
from miae.synthetic import make_backbone


def atom_line(serial, name, resname, resseq, xyz, b, chain="A", altloc=" ", icode=" ",
              record="ATOM  "):
    x, y, z = xyz
    return (f"{record}{serial:5d} {name:<4s}{altloc}{resname:3s} {chain}{resseq:4d}{icode}   "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{b:6.2f}          {name.strip()[0]:>2s}")


def residue_lines(resseq, resname="ALA", b=90.0, atoms=(" N  ", " CA ", " C  "), **kw):
    base = np.array([[0.0, 1.4, 0.0], [0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]) + 3.8 * resseq
    pos = {" N  ": base[0], " CA ": base[1], " C  ": base[2], " O  ": base[2] + 1.0,
           " CB ": base[1] - 1.0}
    return [atom_line(resseq * 10 + k, a, resname, resseq, pos[a], b, **kw)
            for k, a in enumerate(atoms)]


def test_single_residue():
    text = "\n".join(residue_lines(1, b=91.2))
    b = parse_backbone(text)
    assert len(b) == 1
    assert b.sequence == ["A"]
    np.testing.assert_allclose(b.plddt, [91.2])


def test_incomplete_residue_dropped():
    text = "\n".join(residue_lines(1) + residue_lines(2, atoms=(" N  ", " C  ")) + residue_lines(3))
    b = parse_backbone(text)
    assert len(b) == 2
    assert b.dropped_residues == 1
    assert any("dropped 1" in w for w in b.warnings)


def test_no_complete_residue_raises():
    with pytest.raises(ParseError):
        parse_backbone("\n".join(residue_lines(1, atoms=(" N  ", " CA "))))
    with pytest.raises(ParseError):
        parse_backbone("HEADER nothing here\n")


def test_malformed_coordinate_reports_line():
    lines = residue_lines(1)
    lines[1] = lines[1][:30] + "   x.abc" + lines[1][38:]
    with pytest.raises(ParseError, match="line 2"):
        parse_backbone("\n".join(lines))


def test_first_chain_first_model_altloc():
    lines = residue_lines(1, chain="A") + residue_lines(2, chain="B")
    lines += residue_lines(3, altloc="B")
    lines += ["ENDMDL"] + residue_lines(4)
    b = parse_backbone("\n".join(lines))
    assert len(b) == 1


def test_insertion_codes_are_separate_residues():
    lines = residue_lines(5) + residue_lines(5, resname="GLY", icode="A")
    b = parse_backbone("\n".join(lines))
    assert b.sequence == ["A", "G"]


def test_hetatm_ignored_and_unknown_residue():
    lines = residue_lines(1, resname="XYZ") + [
        atom_line(99, " O  ", "HOH", 50, (0, 0, 0), 10.0, record="HETATM")]
    b = parse_backbone("\n".join(lines))
    assert b.sequence == ["X"]
    assert b.aatype.tolist() == [20]


def test_afdb_style_file_against_text_oracle(rng):
    # 100 residues with side-chain atoms, as in predicted-model files
    src = make_backbone("helix", 100, rng)
    lines, serial = [], 1
    for i in range(100):
        for j, name in enumerate((" N  ", " CA ", " C  ")):
            lines.append(atom_line(serial, name, "LEU", i + 1, src.coords[i, j], src.plddt[i]))
            serial += 1
        lines.append(atom_line(serial, " O  ", "LEU", i + 1, src.coords[i, 2] + 1.2, src.plddt[i]))
        lines.append(atom_line(serial + 1, " CB ", "LEU", i + 1, src.coords[i, 1] + 1.5,
                               src.plddt[i]))
        serial += 2
    text = "\n".join(["HEADER    PREDICTED MODEL"] + lines + ["END"])
    b = parse_backbone(text)

    # oracle: scan CA records directly
    ca_b = [float(ln[60:66]) for ln in text.splitlines()
            if ln.startswith("ATOM") and ln[12:16] == " CA "]
    assert len(b) == 100 == len(ca_b)
    assert np.mean(b.plddt) == pytest.approx(np.mean(ca_b), abs=1e-12)
    np.testing.assert_allclose(b.coords, np.round(src.coords, 3), atol=1e-9)


@pytest.mark.parametrize("plddt,expected", [([85, 85], True), ([80, 80], False), ([70, 95], True)])
def test_plddt_filter(plddt, expected):
    b = ProteinBackbone("x", np.zeros((2, 3, 3)) + np.arange(3)[:, None], ["A", "A"], plddt)
    assert passes_plddt_filter(b, 80) is expected


def test_pdb_round_trip(tmp_path, rng):
    b = make_backbone("helix_loop_helix", 30, rng)
    write_pdb(b, tmp_path / "x.pdb")
    back = read_pdb(tmp_path / "x.pdb")
    np.testing.assert_allclose(back.coords, b.coords, atol=5e-4 + 1e-9)
    assert back.sequence == b.sequence
    np.testing.assert_allclose(back.plddt, b.plddt, atol=5e-3)


def test_pdb_columns(rng):
    b = make_backbone("helix", 2, rng)
    line = format_pdb(b).splitlines()[1]
    assert line[:6] == "ATOM  "
    assert line[12:16] == " CA "
    assert float(line[30:38]) == pytest.approx(b.coords[0, 1, 0], abs=5e-4)
    assert line[76:78] == " C"


def test_cache_round_trip(tmp_path, rng):
    bs = [make_backbone("helix", n, rng, id=f"s{n}") for n in (5, 9, 13)]
    save_backbones(bs, tmp_path / "c.npz")
    back = load_backbones(tmp_path / "c.npz")
    assert [b.id for b in back] == ["s5", "s9", "s13"]
    for a, b in zip(bs, back):
        np.testing.assert_allclose(a.coords, b.coords, atol=1e-3)
        assert a.sequence == b.sequence


def test_residue_order_is_file_order():
    lines = residue_lines(7, resname="GLY") + residue_lines(3, resname="TRP")
    assert parse_backbone("\n".join(lines)).sequence == ["G", "W"]


def test_chain_break_is_warning_not_error():
    b = ProteinBackbone("x", np.array([[[0, 1, 0], [0, 0, 0], [1, 0, 0]],
                                       [[20, 1, 0], [20, 0, 0], [21, 0, 0]]], float),
                        ["A", "A"], [90, 90])
    assert b.chain_breaks() == [0]
