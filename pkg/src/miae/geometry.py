"""Residue frames, rigid transforms, virtual C-beta and Kabsch RMSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from miae.errors import DegenerateFrameError, InvalidTransformError, ShapeError
from miae.structure_io import ProteinBackbone

EPS = 1e-6

# ideal-geometry coefficients for the virtual C-beta
CB_A = -0.58273431
CB_B = 0.56802827
CB_C = -0.54067466


@dataclass(frozen=True)
class Frame:
    rotation: np.ndarray
    translation: np.ndarray

    def to_global(self, p_local):
        return to_global(self, p_local)

    def to_local(self, p_global):
        return to_local(self, p_global)


@dataclass(frozen=True)
class FrameSet:
    """Stacked residue frames: ``rotations`` (n, 3, 3), ``translations`` (n, 3)."""

    rotations: np.ndarray
    translations: np.ndarray

    def __len__(self):
        return len(self.translations)

    def __getitem__(self, i) -> Frame:
        return Frame(self.rotations[i], self.translations[i])

    def subset(self, idx) -> "FrameSet":
        return FrameSet(self.rotations[idx], self.translations[idx])


def frames_from_coords(coords: np.ndarray) -> FrameSet:
    """Gram-Schmidt frames from (n, 3, 3) N/CA/C coordinates.

    The first axis points from CA to C, the second is the component of
    CA->N orthogonal to it.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n, ca, c = coords[:, 0], coords[:, 1], coords[:, 2]
    v1 = c - ca
    v2 = n - ca
    norm1 = np.linalg.norm(v1, axis=-1)
    bad = np.nonzero(norm1 < EPS)[0]
    if bad.size:
        raise DegenerateFrameError(f"residue {bad[0]}: C coincides with CA", residue=int(bad[0]))
    e1 = v1 / norm1[:, None]
    u2 = v2 - np.sum(v2 * e1, axis=-1, keepdims=True) * e1
    norm2 = np.linalg.norm(u2, axis=-1)
    bad = np.nonzero(norm2 < EPS)[0]
    if bad.size:
        raise DegenerateFrameError(f"residue {bad[0]}: N, CA, C are collinear", residue=int(bad[0]))
    e2 = u2 / norm2[:, None]
    e3 = np.cross(e1, e2)
    return FrameSet(np.stack([e1, e2, e3], axis=-1), ca.copy())


def build_frames(b: ProteinBackbone) -> FrameSet:
    return frames_from_coords(b.coords)


def to_global(f: Frame, p_local):
    return f.rotation @ np.asarray(p_local, dtype=np.float64) + f.translation


def to_local(f: Frame, p_global):
    return f.rotation.T @ (np.asarray(p_global, dtype=np.float64) - f.translation)


def check_rotation(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidTransformError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidTransformError("matrix is not a proper rotation")
    return R


def apply_rigid(b: ProteinBackbone, R, t) -> ProteinBackbone:
    """Move every backbone atom by x -> R x + t."""
    R = check_rotation(R)
    t = np.asarray(t, dtype=np.float64)
    return b.replace(coords=b.coords @ R.T + t)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def virtual_cbeta(n, ca, c):
    """Ideal-geometry C-beta position; accepts single residues or stacks."""
    n, ca, c = (np.asarray(v, dtype=np.float64) for v in (n, ca, c))
    b = ca - n
    cc = c - ca
    a = np.cross(b, cc)
    if np.any(np.linalg.norm(a, axis=-1) < EPS):
        raise DegenerateFrameError("cannot place C-beta on collinear N, CA, C")
    return CB_A * a + CB_B * b + CB_C * cc + ca


def kabsch_superpose(mobile, target):
    """Optimal rotation and translation mapping ``mobile`` onto ``target``."""
    mobile = np.asarray(mobile, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if mobile.shape != target.shape:
        raise ShapeError(f"point sets differ in shape: {mobile.shape} vs {target.shape}")
    if len(mobile) == 0:
        raise ShapeError("point sets must be non-empty")
    mu_m, mu_t = mobile.mean(0), target.mean(0)
    H = (mobile - mu_m).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_t - R @ mu_m


def kabsch_rmsd(a, b) -> float:
    """RMSD between two point sets after optimal rigid superposition.

    Inputs may be (m, 3) or any shape flattening to (m, 3), e.g. (n, 3, 3)
    backbones.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    R, t = kabsch_superpose(a, b)
    diff = a @ R.T + t - b
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def backbone_rmsd(pred, true, atoms: str = "backbone") -> float:
    """Kabsch RMSD over all N/CA/C atoms, or CA only with ``atoms='ca'``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if atoms == "ca":
        return kabsch_rmsd(pred[:, 1], true[:, 1])
    return kabsch_rmsd(pred, true)
