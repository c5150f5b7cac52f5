import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand_backbone, rigid
from miae.errors import DegenerateFrameError, InvalidTransformError, ShapeError
from miae.geometry import (Frame, apply_rigid, backbone_rmsd, build_frames, check_rotation,
                           frames_from_coords, kabsch_rmsd, random_rotation, to_global, to_local,
                           virtual_cbeta)
from miae.structure_io import ProteinBackbone

# N, CA, C of a single axis-aligned residue
AXIS = np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def backbone(coords):
    n = len(coords)
    return ProteinBackbone("t", coords, ["A"] * n, [90.0] * n)


def test_axis_aligned_frame_is_identity():
    f = build_frames(backbone(AXIS))[0]
    np.testing.assert_allclose(f.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.translation, 0, atol=1e-12)


def test_translated_frame():
    f = build_frames(backbone(AXIS + 5.0))[0]
    np.testing.assert_allclose(f.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.translation, [5, 5, 5], atol=1e-12)


def test_rotated_frame_equals_rotation():
    f = build_frames(backbone(AXIS @ RZ90.T))[0]
    np.testing.assert_allclose(f.rotation, RZ90, atol=1e-12)
    np.testing.assert_allclose(f.translation, RZ90 @ AXIS[0, 1], atol=1e-12)


def test_degenerate_frames():
    collinear = np.array([[[-1.0, 0, 0], [0, 0, 0], [1.0, 0, 0]]])
    with pytest.raises(DegenerateFrameError) as e:
        build_frames(backbone(np.concatenate([AXIS, collinear])))
    assert e.value.residue == 1
    coincident = np.array([[[0.0, 1, 0], [0, 0, 0], [0, 0, 0]]])
    with pytest.raises(DegenerateFrameError):
        build_frames(backbone(coincident))


def test_frames_orthonormal(rng):
    fs = build_frames(rand_backbone(50, seed=3))
    R = fs.rotations
    np.testing.assert_allclose(R.transpose(0, 2, 1) @ R, np.broadcast_to(np.eye(3), R.shape),
                               atol=1e-6)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-6)


def test_to_global_local():
    ident = Frame(np.eye(3), np.zeros(3))
    np.testing.assert_allclose(to_global(ident, [1, 2, 3]), [1, 2, 3])
    shifted = Frame(np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(to_local(shifted, [1, 2, 3]), [0, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_local_global_round_trip(seed):
    rng = np.random.default_rng(seed)
    R, t = rigid(rng)
    f = Frame(R, t)
    p = rng.normal(size=3) * 10
    np.testing.assert_allclose(to_local(f, to_global(f, p)), p, atol=1e-9)
    np.testing.assert_allclose(f.to_local(f.to_global(p)), p, atol=1e-9)


def test_apply_rigid_identity_and_isometry(rng):
    b = rand_backbone(20, seed=1)
    same = apply_rigid(b, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(same.coords, b.coords)
    R, t = rigid(rng)
    moved = apply_rigid(b, R, t)
    x, y = b.coords.reshape(-1, 3), moved.coords.reshape(-1, 3)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    np.testing.assert_allclose(dx, dy, atol=1e-9)
    assert moved.sequence == b.sequence
    np.testing.assert_array_equal(moved.plddt, b.plddt)


def test_apply_rigid_rejects_non_rotation():
    b = rand_backbone(3)
    with pytest.raises(InvalidTransformError):
        apply_rigid(b, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidTransformError):
        apply_rigid(b, 2 * np.eye(3), np.zeros(3))
    with pytest.raises(InvalidTransformError):
        check_rotation(np.eye(2))


def test_frames_compose_with_rigid_motion(rng):
    b = rand_backbone(30, seed=5)
    R, t = rigid(rng)
    f0 = build_frames(b)
    f1 = build_frames(apply_rigid(b, R, t))
    np.testing.assert_allclose(f1.rotations, R @ f0.rotations, atol=1e-9)
    np.testing.assert_allclose(f1.translations, f0.translations @ R.T + t, atol=1e-9)


def test_local_coordinates_invariant(rng):
    b = rand_backbone(25, seed=7)
    R, t = rigid(rng)
    moved = apply_rigid(b, R, t)
    f0, f1 = build_frames(b), build_frames(moved)
    for i in range(len(b)):
        for atom in range(3):
            np.testing.assert_allclose(to_local(f1[i], moved.coords[i, atom]),
                                       to_local(f0[i], b.coords[i, atom]), atol=1e-6)


def test_virtual_cbeta_regression_constant():
    cb = virtual_cbeta([-0.525, 1.363, 0.0], [0.0, 0.0, 0.0], [1.526, 0.0, 0.0])
    # frozen from a one-off direct evaluation of the placement formula
    np.testing.assert_allclose(cb, [-0.52685469, -0.77422253, -1.21205124], atol=1e-8)
    assert 1.48 < np.linalg.norm(cb) < 1.58


def test_virtual_cbeta_equivariant(rng):
    b = rand_backbone(10, seed=2)
    R, t = rigid(rng)
    cb = virtual_cbeta(b.n, b.ca, b.c)
    moved = apply_rigid(b, R, t)
    np.testing.assert_allclose(virtual_cbeta(moved.n, moved.ca, moved.c), cb @ R.T + t, atol=1e-9)


def test_virtual_cbeta_ideal_bond_length(rng):
    from miae.synthetic import backbone_from_torsions
    coords = backbone_from_torsions(np.full(12, -60.0), np.full(12, -45.0))
    cb = virtual_cbeta(coords[:, 0], coords[:, 1], coords[:, 2])
    np.testing.assert_allclose(np.linalg.norm(cb - coords[:, 1], axis=-1), 1.53, atol=0.05)


def test_virtual_cbeta_degenerate():
    with pytest.raises(DegenerateFrameError):
        virtual_cbeta([-1.0, 0, 0], [0, 0, 0], [1.0, 0, 0])


def test_kabsch_basic(rng):
    a = rng.normal(size=(20, 3))
    assert kabsch_rmsd(a, a) == pytest.approx(0.0, abs=1e-12)
    R, t = rigid(rng)
    assert kabsch_rmsd(a, a @ R.T + t) == pytest.approx(0.0, abs=1e-6)


def test_kabsch_two_point_oracle():
    a = [[0, 0, 0], [2, 0, 0]]
    b = [[0, 0, 0], [4, 0, 0]]
    # brute force: centred a is +-u for unit u at angle th to the x axis,
    # centred b is +-2x; squared deviation per point is 5 - 4 cos th
    th = np.linspace(-np.pi, np.pi, 100001)
    oracle = np.sqrt(np.min(5 - 4 * np.cos(th)))
    assert kabsch_rmsd(a, b) == pytest.approx(oracle, abs=1e-9)
    assert oracle == pytest.approx(1.0, abs=1e-9)


def test_kabsch_handles_reflection(rng):
    a = rng.normal(size=(30, 3))
    mirrored = a * np.array([1, 1, -1])
    # a proper rotation cannot undo a mirror image of a generic cloud
    assert kabsch_rmsd(a, mirrored) > 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_kabsch_symmetric_nonnegative(seed, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
    r1, r2 = kabsch_rmsd(a, b), kabsch_rmsd(b, a)
    assert r1 >= 0
    assert r1 == pytest.approx(r2, abs=1e-9)


def test_kabsch_shape_mismatch():
    with pytest.raises(ShapeError):
        kabsch_rmsd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_backbone_rmsd_variants(rng):
    b = rand_backbone(12, seed=9)
    noisy = b.coords + rng.normal(scale=0.3, size=b.coords.shape)
    assert backbone_rmsd(noisy, b.coords) > 0
    assert backbone_rmsd(noisy, b.coords, atoms="ca") == pytest.approx(
        kabsch_rmsd(noisy[:, 1], b.coords[:, 1]))


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        check_rotation(random_rotation(rng))


def test_frames_from_coords_matches_build_frames():
    b = rand_backbone(8, seed=4)
    np.testing.assert_array_equal(frames_from_coords(b.coords).rotations,
                                  build_frames(b).rotations)
