"""Backbone ingestion from PDB text, confidence filtering and a compact
binary cache for parsed structures."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from miae.errors import ParseError

AA_ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN_AA = "X"
AA_TO_INDEX = {aa: i for i, aa in enumerate(AA_ALPHABET)}
UNKNOWN_INDEX = len(AA_ALPHABET)

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
    "MSE": "M",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items() if k != "MSE"}
ONE_TO_THREE[UNKNOWN_AA] = "UNK"

BACKBONE_ATOMS = ("N", "CA", "C")
# consecutive CA-CA distances above this are recorded as chain breaks
CHAIN_BREAK_DISTANCE = 4.2


@dataclass
class ProteinBackbone:
    """Per-residue N/CA/C coordinates with sequence and pLDDT.

    ``coords`` has shape (n, 3, 3), atoms ordered N, CA, C.
    """

    id: str
    coords: np.ndarray
    sequence: list[str]
    plddt: np.ndarray
    dropped_residues: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.plddt = np.asarray(self.plddt, dtype=np.float64)
        self.sequence = list(self.sequence)
        n = len(self.sequence)
        if n < 1:
            raise ValueError("backbone must contain at least one residue")
        if self.coords.shape != (n, 3, 3) or self.plddt.shape != (n,):
            raise ValueError(
                f"inconsistent backbone arrays: coords {self.coords.shape}, "
                f"sequence {n}, plddt {self.plddt.shape}"
            )
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("backbone coordinates must be finite")

    def __len__(self):
        return len(self.sequence)

    @property
    def n(self):
        return self.coords[:, 0]

    @property
    def ca(self):
        return self.coords[:, 1]

    @property
    def c(self):
        return self.coords[:, 2]

    @property
    def aatype(self) -> np.ndarray:
        """Integer residue types, ``UNKNOWN_INDEX`` for anything outside the alphabet."""
        return np.array([AA_TO_INDEX.get(a, UNKNOWN_INDEX) for a in self.sequence], dtype=np.int64)

    def chain_breaks(self) -> list[int]:
        d = np.linalg.norm(np.diff(self.ca, axis=0), axis=-1)
        return [int(i) for i in np.nonzero(d > CHAIN_BREAK_DISTANCE)[0]]

    def replace(self, coords=None, **kwargs) -> "ProteinBackbone":
        return ProteinBackbone(
            id=kwargs.get("id", self.id),
            coords=self.coords.copy() if coords is None else coords,
            sequence=kwargs.get("sequence", self.sequence),
            plddt=kwargs.get("plddt", self.plddt.copy()),
            dropped_residues=self.dropped_residues,
            warnings=list(self.warnings),
        )


def _float_field(line, start, stop, lineno, name):
    raw = line[start:stop]
    try:
        return float(raw)
    except ValueError:
        raise ParseError(f"line {lineno}: malformed {name} field {raw!r}") from None


def parse_backbone(text: str, id: str = "structure") -> ProteinBackbone:
    """Parse the first chain of the first model in PDB-format text.

    Residues are grouped by (resSeq, insertion code) in file order; those
    lacking any of N, CA, C are dropped and counted in ``dropped_residues``.
    pLDDT is taken from the B-factor column of the CA atom.
    """
    chain = None
    residues: dict[tuple[str, str], dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if record != "ATOM  ":
            continue
        altloc = line[16:17] if len(line) > 16 else " "
        if altloc not in (" ", "A"):
            continue
        chain_id = line[21:22] if len(line) > 21 else " "
        if chain is None:
            chain = chain_id
        elif chain_id != chain:
            continue
        atom = line[12:16].strip()
        key = (line[22:26].strip(), line[26:27].strip() if len(line) > 26 else "")
        res = residues.setdefault(key, {"name": line[17:20].strip(), "atoms": {}, "b": {}})
        if atom not in BACKBONE_ATOMS:
            continue
        xyz = [
            _float_field(line, 30, 38, lineno, "x"),
            _float_field(line, 38, 46, lineno, "y"),
            _float_field(line, 46, 54, lineno, "z"),
        ]
        if not np.all(np.isfinite(xyz)):
            raise ParseError(f"line {lineno}: non-finite coordinate")
        bfac = _float_field(line, 60, 66, lineno, "B-factor") if len(line.rstrip()) > 60 else 0.0
        res["atoms"].setdefault(atom, xyz)
        res["b"].setdefault(atom, bfac)

    coords, sequence, plddt = [], [], []
    dropped = 0
    for res in residues.values():
        if not all(a in res["atoms"] for a in BACKBONE_ATOMS):
            dropped += 1
            continue
        coords.append([res["atoms"][a] for a in BACKBONE_ATOMS])
        sequence.append(THREE_TO_ONE.get(res["name"], UNKNOWN_AA))
        plddt.append(res["b"]["CA"])
    if not coords:
        raise ParseError("no residue with complete N/CA/C backbone found")

    bb = ProteinBackbone(id=id, coords=np.array(coords), sequence=sequence,
                         plddt=np.array(plddt), dropped_residues=dropped)
    if dropped:
        bb.warnings.append(f"dropped {dropped} residue(s) with incomplete backbone")
    for i in bb.chain_breaks():
        bb.warnings.append(f"chain break between residues {i} and {i + 1}")
    return bb


def read_pdb(path, id: str | None = None) -> ProteinBackbone:
    path = Path(path)
    return parse_backbone(path.read_text(), id=id or path.stem)


def passes_plddt_filter(b: ProteinBackbone, threshold: float = 80.0) -> bool:
    """True iff mean pLDDT is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 100.0:
        raise ValueError(f"threshold must lie in [0, 100], got {threshold}")
    return bool(np.mean(b.plddt) > threshold)


def format_pdb(b: ProteinBackbone, bfactors=None, chain: str = "A") -> str:
    """Render backbone atoms as PDB ATOM records.

    ``bfactors`` overrides the per-residue B-factor column (defaults to pLDDT).
    """
    bfactors = b.plddt if bfactors is None else np.asarray(bfactors, dtype=float)
    lines = []
    serial = 1
    for i, aa in enumerate(b.sequence):
        resname = ONE_TO_THREE.get(aa, "UNK")
        for j, atom in enumerate(BACKBONE_ATOMS):
            x, y, z = b.coords[i, j]
            lines.append(
                f"ATOM  {serial:5d} {' ' + atom:<4s} {resname:3s} {chain}{i + 1:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{bfactors[i]:6.2f}          "
                f"{atom[0]:>2s}"
            )
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_pdb(b: ProteinBackbone, path, bfactors=None) -> None:
    Path(path).write_text(format_pdb(b, bfactors=bfactors))


def save_backbones(backbones: list[ProteinBackbone], path) -> None:
    """Store parsed backbones in a single ``.npz`` cache.

    Coordinates are stored as float32 after rounding to PDB precision (1e-3 Å).
    """
    lengths = np.array([len(b) for b in backbones], dtype=np.int64)
    np.savez_compressed(
        path,
        format=np.array("miae-backbones-v1"),
        ids=np.array([b.id for b in backbones]),
        lengths=lengths,
        coords=np.concatenate([np.round(b.coords, 3) for b in backbones]).astype(np.float32),
        sequence=np.array(["".join(b.sequence) for b in backbones]),
        plddt=np.concatenate([b.plddt for b in backbones]).astype(np.float32),
    )


def load_backbones(path) -> list[ProteinBackbone]:
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != "miae-backbones-v1":
            raise ParseError(f"{path}: not a backbone cache")
        offsets = np.concatenate([[0], np.cumsum(data["lengths"])])
        out = []
        for k, (id_, seq) in enumerate(zip(data["ids"], data["sequence"])):
            lo, hi = offsets[k], offsets[k + 1]
            out.append(ProteinBackbone(
                id=str(id_),
                coords=data["coords"][lo:hi].astype(np.float64),
                sequence=list(str(seq)),
                plddt=data["plddt"][lo:hi].astype(np.float64),
            ))
    return out
