"""CATH label aggregation and stratified train/val/test splitting."""

from __future__ import annotations

import csv
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from miae.errors import LabelError, SplitError

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
LABELMAP_VERSION = "miae-labelmap v1"
SPLITS_VERSION = "miae-splits v1"

_CODE_RE = re.compile(r"^\d+\.\d+(\.(\d+|x)(\.\d+)?)?$")


@dataclass
class LabelMap:
    """Aggregated topology labels.

    ``assignment[i]`` indexes ``labels`` for input ``i``, or is -1 when the
    sample belongs to an architecture group too small to reach ``cutoff``
    even after merging.
    """

    labels: list[str]
    assignment: np.ndarray
    counts: np.ndarray
    cutoff: int
    codes: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def kept(self) -> np.ndarray:
        return np.nonzero(self.assignment >= 0)[0]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise LabelError(f"unknown label {label!r}") from None


@dataclass
class SplitManifest:
    ratios: tuple
    seed: int
    assignment: np.ndarray  # per sample: 0 train, 1 val, 2 test
    class_counts: dict  # class index -> [n_train, n_val, n_test]

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.assignment == SPLIT_NAMES.index(split))[0]


def normalize_code(code: str, index: int | None = None) -> str:
    """Validate a CATH code and reduce it to C.A.T (``C.A`` becomes ``C.A.x``)."""
    code = str(code).strip()
    if not _CODE_RE.match(code):
        raise LabelError(f"malformed CATH code {code!r} at index {index}", index=index)
    parts = code.split(".")
    if len(parts) == 2:
        parts.append("x")
    return ".".join(parts[:3])


def process_cath_labels(codes, cutoff: int) -> LabelMap:
    """Merge rare topologies into a per-architecture ``C.A.x`` class.

    Within each C.A group, T-classes with fewer than ``cutoff`` samples are
    pooled. If that pool is still below ``cutoff``, the smallest remaining
    T-class of the group (lexicographic on ties) joins it. Groups whose
    pooled label still falls short of ``cutoff`` are dropped.
    """
    if cutoff < 1:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    t_codes = [normalize_code(c, i) for i, c in enumerate(codes)]
    t_counts = Counter(t_codes)

    groups = defaultdict(list)
    for t in sorted(t_counts):
        groups[t.rsplit(".", 1)[0]].append(t)

    merged = set()
    for arch, members in groups.items():
        rare = [t for t in members if t_counts[t] < cutoff]
        if not rare:
            continue
        pool = sum(t_counts[t] for t in rare)
        if pool < cutoff:
            common = [t for t in members if t_counts[t] >= cutoff]
            if common:
                rare.append(min(common, key=lambda t: (t_counts[t], t)))
        merged.update(rare)

    final = [t.rsplit(".", 1)[0] + ".x" if t in merged else t for t in t_codes]
    final_counts = Counter(final)
    labels = sorted(k for k, v in final_counts.items() if v >= cutoff)
    lookup = {lab: i for i, lab in enumerate(labels)}
    assignment = np.array([lookup.get(f, -1) for f in final], dtype=np.int64)
    counts = np.array([final_counts[lab] for lab in labels], dtype=np.int64)
    return LabelMap(labels=labels, assignment=assignment, counts=counts, cutoff=cutoff,
                    codes=final)


def _largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    remainder = n - sum(counts)
    # stable sort: ties go to the earlier split, i.e. train first
    order = sorted(range(len(ratios)), key=lambda k: -(quotas[k] - counts[k]))
    for k in order[:remainder]:
        counts[k] += 1
    return counts


def stratified_split(assignment, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitManifest:
    """Per-class seeded shuffle, cut by largest-remainder rounded quotas.

    Samples with a negative class index are left out (assignment -1).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive values summing to 1, got {ratios}")
    assignment = np.asarray(assignment, dtype=np.int64)
    out = np.full(len(assignment), -1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    class_counts = {}
    for cls in np.unique(assignment[assignment >= 0]):
        members = np.nonzero(assignment == cls)[0]
        if members.size == 0:
            raise SplitError(f"class {cls} is empty")
        members = members[rng.permutation(members.size)]
        sizes = _largest_remainder(members.size, ratios)
        bounds = np.cumsum([0] + sizes)
        for k in range(3):
            out[members[bounds[k]:bounds[k + 1]]] = k
        class_counts[int(cls)] = sizes
    return SplitManifest(ratios=ratios, seed=seed, assignment=out, class_counts=class_counts)


# ---------------------------------------------------------------- file I/O


@dataclass
class ManifestRow:
    id: str
    cath: str
    plddt: float
    path: str


def read_manifest(path) -> list[ManifestRow]:
    """Read the ``id / cath / plddt / path`` tab-separated sample table."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines, delimiter="\t")
    missing = {"id", "path"} - set(reader.fieldnames or [])
    if missing:
        raise LabelError(f"{path}: manifest lacks column(s) {sorted(missing)}")
    for rec in reader:
        p = rec["path"]
        if p and not Path(p).is_absolute():
            p = str(path.parent / p)
        rows.append(ManifestRow(
            id=rec["id"],
            cath=rec.get("cath", "") or "",
            plddt=float(rec["plddt"]) if rec.get("plddt") not in (None, "") else float("nan"),
            path=p,
        ))
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("id\tcath\tplddt\tpath\n")
        for r in rows:
            fh.write(f"{r.id}\t{r.cath}\t{r.plddt:.2f}\t{r.path}\n")


def write_labelmap(lm: LabelMap, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {LABELMAP_VERSION} cutoff={lm.cutoff}\n")
        fh.write("index\tlabel\tcount\n")
        for i, (lab, cnt) in enumerate(zip(lm.labels, lm.counts)):
            fh.write(f"{i}\t{lab}\t{cnt}\n")


def read_labelmap(path) -> tuple[list[str], np.ndarray, int]:
    """Return (labels, counts, cutoff) from a label map file."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith(f"# {LABELMAP_VERSION}"):
            raise LabelError(f"{path}: unsupported label map header {header.strip()!r}")
        cutoff = int(header.split("cutoff=")[1])
        reader = csv.DictReader(fh, delimiter="\t")
        labels, counts = [], []
        for rec in reader:
            labels.append(rec["label"])
            counts.append(int(rec["count"]))
    return labels, np.array(counts, dtype=np.int64), cutoff


def write_splits(ids, lm: LabelMap, sm: SplitManifest, path) -> None:
    ratios = ",".join(f"{r:g}" for r in sm.ratios)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SPLITS_VERSION} seed={sm.seed} ratios={ratios}\n")
        fh.write("id\tlabel\tsplit\n")
        for i, sid in enumerate(ids):
            k = sm.assignment[i]
            if k < 0:
                continue
            fh.write(f"{sid}\t{lm.labels[lm.assignment[i]]}\t{SPLIT_NAMES[k]}\n")


def read_splits(path) -> list[tuple[str, str, str]]:
    """Return (id, label, split) triples."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith(f"# {SPLITS_VERSION}"):
            raise LabelError(f"{path}: unsupported split file header {header.strip()!r}")
        reader = csv.DictReader(fh, delimiter="\t")
        return [(r["id"], r["label"], r["split"]) for r in reader]
