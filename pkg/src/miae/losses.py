"""Composite backbone reconstruction objective.

Five terms: truncated pairwise-distance and pairwise-direction regression,
binned C-beta distance and binned orientation classification, and
amino-acid recovery. All terms except the last depend on coordinates only
through rigid-motion invariant quantities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from miae.errors import DomainError, ShapeError
from miae.geometry import virtual_cbeta
from miae.structure_io import UNKNOWN_INDEX

DIST_CLAMP = 25.0
DIR_CLAMP = 20.0
N_DIST_BINS = 64
N_DIR_BINS = 16
N_DIR_SLOTS = 9
N_AA = 20

# 63 evenly spaced distances from 2.3125 to 21.6875 Å, squared, after a 0 bound
DIST_BIN_LOWER = np.concatenate([[0.0], np.linspace(2.3125, 21.6875, N_DIST_BINS - 1) ** 2])


def _check_coords(pred, true):
    if pred.shape != true.shape or pred.ndim != 3 or pred.shape[1:] != (3, 3):
        raise ShapeError(f"expected matching (n, 3, 3) coordinates, got {tuple(pred.shape)} "
                         f"and {tuple(true.shape)}")


def distance_loss(pred: torch.Tensor, true: torch.Tensor) -> torch.Tensor:
    """mean(min((D_pred - D)^2, 25)) over all (3n)^2 backbone atom pairs."""
    _check_coords(pred, true)
    p = pred.reshape(-1, 3)
    t = true.reshape(-1, 3)
    d_pred = _pairwise_dist(p)
    d_true = _pairwise_dist(t)
    return torch.clamp((d_pred - d_true) ** 2, max=DIST_CLAMP).mean()


def _pairwise_dist(x):
    diff = x[:, None, :] - x[None, :, :]
    # the epsilon keeps the gradient finite for coincident atoms (diagonal
    # included); it biases both matrices identically
    return torch.sqrt((diff * diff).sum(-1) + 1e-10)


def backbone_vectors(x: torch.Tensor) -> torch.Tensor:
    """Six per-residue vectors, shape (n, 6, 3); chain-end terms are zero."""
    n_at, ca, c = x[:, 0], x[:, 1], x[:, 2]
    a = ca - n_at
    b = c - ca
    zero = torch.zeros_like(a[:1])
    c_next = torch.cat([n_at[1:] - c[:-1], zero], 0)
    c_prev = torch.cat([zero, n_at[1:] - c[:-1]], 0)
    return torch.stack([
        a,
        b,
        c_next,
        -torch.cross(a, b, dim=-1),
        torch.cross(c_prev, a, dim=-1),
        torch.cross(b, c_next, dim=-1),
    ], 1)


def direction_loss(pred: torch.Tensor, true: torch.Tensor) -> torch.Tensor:
    """mean(min((D_pred - D)^2, 20)) over all (6n)^2 vector dot products."""
    _check_coords(pred, true)
    vp = backbone_vectors(pred).reshape(-1, 3)
    vt = backbone_vectors(true).reshape(-1, 3)
    return torch.clamp((vp @ vp.T - vt @ vt.T) ** 2, max=DIR_CLAMP).mean()


def bin_distance_sq(d_sq):
    """Index of the largest lower bound not exceeding ``d_sq`` (clamped to 63)."""
    d_sq = np.asarray(d_sq, dtype=np.float64)
    if np.any(d_sq < 0) or np.any(np.isnan(d_sq)):
        raise DomainError("squared distance must be non-negative")
    idx = np.searchsorted(DIST_BIN_LOWER, d_sq, side="right") - 1
    return np.minimum(idx, N_DIST_BINS - 1) if idx.ndim else int(min(idx, N_DIST_BINS - 1))


# dots within this distance below a bin edge count as on the edge, so that
# analytically orthogonal self-pair slots (exact 0) bin stably under rotation
DIR_EDGE_TOL = 1e-9


def bin_direction(dot):
    """16 bins of width 1/8 over [-1, 1], lower-inclusive, last bin closed."""
    dot = np.clip(np.asarray(dot, dtype=np.float64), -1.0, 1.0)
    idx = np.minimum(np.floor((dot + 1.0) * 8.0 + DIR_EDGE_TOL), N_DIR_BINS - 1).astype(np.int64)
    return idx if idx.ndim else int(idx)


def distance_bin_labels(true) -> np.ndarray:
    true = np.asarray(true, dtype=np.float64)
    cb = virtual_cbeta(true[:, 0], true[:, 1], true[:, 2])
    diff = cb[:, None] - cb[None, :]
    return bin_distance_sq(np.sum(diff * diff, -1))


def unit_frame_vectors(true) -> np.ndarray:
    """CA->C, CA->N and their cross product, each unit length; (n, 3, 3)."""
    true = np.asarray(true, dtype=np.float64)
    u = true[:, 2] - true[:, 1]
    v = true[:, 0] - true[:, 1]
    w = np.cross(u, v)
    vecs = np.stack([u, v, w], 1)
    return vecs / np.linalg.norm(vecs, axis=-1, keepdims=True)


def direction_bin_labels(true) -> np.ndarray:
    """(n, n, 9) labels; slot 3a+b holds the dot of vector a of i with vector b of j."""
    vecs = unit_frame_vectors(true)
    dots = np.einsum("iad,jbd->ijab", vecs, vecs)
    n = len(vecs)
    return bin_direction(dots.reshape(n, n, N_DIR_SLOTS))


def _as_true(true):
    if isinstance(true, torch.Tensor):
        true = true.detach().cpu().numpy()
    return np.asarray(true, dtype=np.float64)


def binned_distance_loss(pair_logits: torch.Tensor, true) -> torch.Tensor:
    true = _as_true(true)
    n = len(true)
    if tuple(pair_logits.shape) != (n, n, N_DIST_BINS):
        raise ShapeError(f"expected ({n}, {n}, {N_DIST_BINS}) logits, got {tuple(pair_logits.shape)}")
    labels = torch.as_tensor(distance_bin_labels(true), device=pair_logits.device)
    return F.cross_entropy(pair_logits.reshape(-1, N_DIST_BINS), labels.reshape(-1))


def binned_direction_loss(pair_logits: torch.Tensor, true) -> torch.Tensor:
    true = _as_true(true)
    n = len(true)
    if tuple(pair_logits.shape) != (n, n, N_DIR_SLOTS, N_DIR_BINS):
        raise ShapeError(f"expected ({n}, {n}, {N_DIR_SLOTS}, {N_DIR_BINS}) logits, "
                         f"got {tuple(pair_logits.shape)}")
    labels = torch.as_tensor(direction_bin_labels(true), device=pair_logits.device)
    return F.cross_entropy(pair_logits.reshape(-1, N_DIR_BINS), labels.reshape(-1))


def inverse_folding_loss(aa_logits: torch.Tensor, aatype) -> torch.Tensor:
    """Cross-entropy over residues of known type; 0 (with a warning) if none."""
    aatype = torch.as_tensor(np.asarray(aatype), device=aa_logits.device, dtype=torch.long)
    if aa_logits.shape != (len(aatype), N_AA):
        raise ShapeError(f"expected ({len(aatype)}, {N_AA}) logits, got {tuple(aa_logits.shape)}")
    known = aatype != UNKNOWN_INDEX
    if not bool(known.any()):
        warnings.warn("no residue of known type; inverse folding loss set to 0", RuntimeWarning)
        return aa_logits.sum() * 0.0
    return F.cross_entropy(aa_logits[known], aatype[known])


@dataclass
class LossReport:
    dist: torch.Tensor
    dir: torch.Tensor
    binned_dist: torch.Tensor
    binned_dir: torch.Tensor
    inverse_folding: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    @staticmethod
    def mean(reports: list["LossReport"]) -> "LossReport":
        return LossReport(**{
            f.name: torch.stack([getattr(r, f.name) for r in reports]).mean()
            for f in fields(LossReport)
        })


def composite_loss(outputs: dict, coords, aatype, use_inverse_folding: bool = True) -> LossReport:
    """Sum of the five terms for one unpadded structure.

    ``outputs`` holds ``coords`` (n,3,3), ``dist_logits`` (n,n,64),
    ``dir_logits`` (n,n,9,16) and ``aa_logits`` (n,20).
    """
    pred = outputs["coords"]
    true = torch.as_tensor(np.asarray(coords), dtype=pred.dtype, device=pred.device)
    terms = dict(
        dist=distance_loss(pred, true),
        dir=direction_loss(pred, true),
        binned_dist=binned_distance_loss(outputs["dist_logits"], coords),
        binned_dir=binned_direction_loss(outputs["dir_logits"], coords),
        inverse_folding=inverse_folding_loss(outputs["aa_logits"], aatype),
    )
    total = terms["dist"] + terms["dir"] + terms["binned_dist"] + terms["binned_dir"]
    if use_inverse_folding:
        total = total + terms["inverse_folding"]
    return LossReport(total=total, **terms)


UNIFORM_DIST_LOSS = math.log(N_DIST_BINS)
UNIFORM_DIR_LOSS = math.log(N_DIR_BINS)
