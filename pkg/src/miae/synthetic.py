"""Idealized synthetic backbones built from internal coordinates, for smoke
tests and toy experiments."""

from __future__ import annotations

import numpy as np

from miae.geometry import random_rotation
from miae.structure_io import AA_ALPHABET, ProteinBackbone

BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
ANGLE_N_CA_C = np.deg2rad(111.2)
ANGLE_CA_C_N = np.deg2rad(116.2)
ANGLE_C_N_CA = np.deg2rad(121.7)

HELIX = (-57.0, -47.0)
STRAND = (-120.0, 130.0)
LOOP = ((-80.0, 150.0), (60.0, 30.0), (-90.0, 0.0), (-70.0, 140.0))
HAIRPIN_STRAND = (-130.0, 135.0)
HAIRPIN_TURN = ((90.0, 30.0), (90.0, 30.0))

# compact folds only: long extended strands span far beyond the 5 Å
# truncation of the distance loss and are poor reconstruction targets
FAMILIES = ("helix", "beta_hairpin", "helix_loop_helix")


def _place(a, b, c, bond, angle, torsion):
    """Position of atom d given a, b, c and the b-c-d geometry (NeRF)."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * np.cos(angle),
                   bond * np.sin(angle) * np.cos(torsion),
                   bond * np.sin(angle) * np.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def backbone_from_torsions(phi, psi, omega=None) -> np.ndarray:
    """(n, 3, 3) N/CA/C coordinates from backbone torsions in degrees."""
    phi = np.deg2rad(np.asarray(phi, dtype=float))
    psi = np.deg2rad(np.asarray(psi, dtype=float))
    n = len(phi)
    omega = np.full(n, np.pi) if omega is None else np.deg2rad(np.asarray(omega, dtype=float))
    coords = np.zeros((n, 3, 3))
    coords[0, 0] = [0.0, 0.0, 0.0]
    coords[0, 1] = [BOND_N_CA, 0.0, 0.0]
    coords[0, 2] = coords[0, 1] + BOND_CA_C * np.array(
        [-np.cos(ANGLE_N_CA_C), np.sin(ANGLE_N_CA_C), 0.0])
    for i in range(1, n):
        N_prev, CA_prev, C_prev = coords[i - 1]
        N = _place(N_prev, CA_prev, C_prev, BOND_C_N, ANGLE_CA_C_N, psi[i - 1])
        CA = _place(CA_prev, C_prev, N, BOND_N_CA, ANGLE_C_N_CA, omega[i - 1])
        C = _place(C_prev, N, CA, BOND_CA_C, ANGLE_N_CA_C, phi[i])
        coords[i] = (N, CA, C)
    return coords


def family_torsions(family: str, n: int) -> np.ndarray:
    """Ideal (phi, psi) per residue, shape (n, 2)."""
    if family == "helix":
        return np.tile(HELIX, (n, 1))
    if family == "strand":
        return np.tile(STRAND, (n, 1))
    if family == "beta_hairpin":
        t = np.tile(HAIRPIN_STRAND, (n, 1))
        start = n // 2 - 1
        t[start:start + 2] = HAIRPIN_TURN
        return t
    if family == "helix_loop_helix":
        t = np.tile(HELIX, (n, 1))
        start = n // 2 - len(LOOP) // 2
        t[start:start + len(LOOP)] = LOOP
        return t
    raise ValueError(f"unknown family {family!r}")


def make_backbone(family: str, n: int, rng: np.random.Generator, torsion_noise: float = 2.0,
                  coord_noise: float = 0.1, id: str | None = None) -> ProteinBackbone:
    """Noisy ideal backbone in a random pose with a random sequence."""
    t = family_torsions(family, n) + rng.normal(scale=torsion_noise, size=(n, 2))
    coords = backbone_from_torsions(t[:, 0], t[:, 1])
    coords = coords + rng.normal(scale=coord_noise, size=coords.shape)
    coords = (coords - coords[:, 1].mean(0)) @ random_rotation(rng).T + rng.normal(scale=10.0, size=3)
    seq = list(rng.choice(list(AA_ALPHABET), size=n))
    plddt = rng.uniform(85.0, 100.0, size=n)
    return ProteinBackbone(id=id or f"{family}_{n}", coords=coords, sequence=seq, plddt=plddt)


def make_dataset(count: int, seed: int = 0, families=FAMILIES, min_length: int = 24,
                 max_length: int = 48, **kwargs) -> tuple[list[ProteinBackbone], list[str]]:
    """``count`` backbones cycling through ``families``; returns (backbones, family labels)."""
    rng = np.random.default_rng(seed)
    out, labels = [], []
    for i in range(count):
        fam = families[i % len(families)]
        n = int(rng.integers(min_length, max_length + 1))
        out.append(make_backbone(fam, n, rng, id=f"syn{seed}_{i:05d}_{fam}", **kwargs))
        labels.append(fam)
    return out, labels


def random_backbone(n: int, rng: np.random.Generator) -> ProteinBackbone:
    """Backbone with uniformly random torsions; useful for invariance checks."""
    phi = rng.uniform(-180, 180, size=n)
    psi = rng.uniform(-180, 180, size=n)
    coords = backbone_from_torsions(phi, psi)
    coords = coords @ random_rotation(rng).T + rng.normal(scale=5.0, size=3)
    seq = list(rng.choice(list(AA_ALPHABET + "X"), size=n))
    return ProteinBackbone(id=f"rand_{n}", coords=coords, sequence=seq,
                           plddt=rng.uniform(50, 100, size=n))
