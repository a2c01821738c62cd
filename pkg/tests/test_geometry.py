"""Geometry tests.

The oracles here are deliberately independent routes: homogeneous 3x3
matrices for SE(2) algebra, a per-cell segment-vs-open-box slab test for ray
traversal, and a matrix-inverse point-in-rectangle test for predictable
masks. They were written against the contracts before the implementation and
stay frozen.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtrack.geometry import (
    GridSpec,
    ObservationGrid,
    Pose2,
    encode_observation,
    predictable_mask,
    se2_apply,
    se2_compose,
    se2_inverse,
    se2_relative,
    wrap_angle,
)

# ---------------------------------------------------------------- oracles


def pose_from_matrix(m: np.ndarray) -> tuple[float, float, float]:
    return float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0])


def assert_pose_close(p: Pose2, xyt: tuple[float, float, float], tol: float = 1e-9):
    assert abs(p.x - xyt[0]) <= tol
    assert abs(p.y - xyt[1]) <= tol
    assert abs(wrap_angle(p.theta - xyt[2])) <= tol


def ray_cells_oracle(bearing: float, t_end: float, spec: GridSpec):
    """Brute force over every cell: slab-intersect the segment [0, t_end]
    from the grid center against the cell's open box; the cell is walked iff
    the overlap has strictly positive length. Terminal cell = walked cell
    whose overlap reaches furthest. Zero-length segment: center cell only."""
    c, cs, m = spec.center, spec.cell_size, spec.size_cells
    if t_end <= 0.0:
        return {(c, c)}, (c, c)
    dx, dy = math.cos(bearing), math.sin(bearing)
    walked = set()
    best = None
    best_hi = -1.0
    for i in range(m):
        for j in range(m):
            lo_x, hi_x = (i - c - 0.5) * cs, (i - c + 0.5) * cs
            lo_y, hi_y = (j - c - 0.5) * cs, (j - c + 0.5) * cs
            t0, t1 = 0.0, t_end
            empty = False
            for d, lo, hi in ((dx, lo_x, hi_x), (dy, lo_y, hi_y)):
                if d == 0.0:
                    if not (lo < 0.0 < hi):
                        empty = True
                        break
                else:
                    a, b = lo / d, hi / d
                    if a > b:
                        a, b = b, a
                    t0, t1 = max(t0, a), min(t1, b)
            if empty or t1 <= t0:
                continue
            walked.add((i, j))
            if t1 > best_hi:
                best_hi, best = t1, (i, j)
    return walked, best


def encode_oracle(rays, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    m = spec.size_cells
    vis = np.zeros((m, m), dtype=np.uint8)
    occ = np.zeros((m, m), dtype=np.uint8)
    hx = spec.half_extent
    any_ray = False
    for bearing, rng in rays:
        any_ray = True
        t_end = min(rng, spec.max_range)
        cells, last = ray_cells_oracle(bearing, t_end, spec)
        for cell in cells:
            vis[cell] = 1
        ex, ey = rng * math.cos(bearing), rng * math.sin(bearing)
        if rng <= spec.max_range and math.isfinite(rng) and abs(ex) < hx and abs(ey) < hx:
            occ[last] = 1
    if any_ray:
        vis[spec.center, spec.center] = 1
        occ[spec.center, spec.center] = 0
    return vis, occ


def mask_oracle(chain, spec: GridSpec) -> np.ndarray:
    total = np.eye(3)
    for t in chain:
        total = t.matrix() @ total
    inv = np.linalg.inv(total)
    m, c, cs = spec.size_cells, spec.center, spec.cell_size
    out = np.zeros((m, m), dtype=np.uint8)
    hx = spec.half_extent
    for i in range(m):
        for j in range(m):
            p = inv @ np.array([(i - c) * cs, (j - c) * cs, 1.0])
            if abs(p[0]) <= hx and abs(p[1]) <= hx:
                out[i, j] = 1
    return out


finite_coord = st.floats(-50.0, 50.0, allow_nan=False)
any_angle = st.floats(-12.0, 12.0, allow_nan=False)
poses = st.builds(Pose2, finite_coord, finite_coord, any_angle)


# ---------------------------------------------------------------- Pose2


def test_theta_normalized_to_half_open_pi():
    assert Pose2(0, 0, math.pi).theta == pytest.approx(math.pi)
    assert Pose2(0, 0, -math.pi).theta == pytest.approx(math.pi)
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    p = Pose2(0, 0, 2 * math.pi)
    assert abs(p.theta) < 1e-12
    assert -math.pi < p.theta <= math.pi


@given(any_angle)
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        Pose2(math.nan, 0, 0)
    with pytest.raises(ValueError):
        Pose2(0, math.inf, 0)


def test_compose_scripted():
    p = Pose2(1.5, -2.0, 0.7)
    assert_pose_close(se2_compose(Pose2.identity(), p), (1.5, -2.0, 0.7))
    assert_pose_close(se2_compose(Pose2(1, 0, 0), Pose2(2, 3, 0)), (3, 3, 0))
    assert_pose_close(
        se2_compose(Pose2(0, 0, math.pi / 2), Pose2(1, 0, 0)), (0, 1, math.pi / 2)
    )


@given(poses, poses)
def test_compose_matches_matrix_oracle(a, b):
    got = se2_compose(a, b)
    want = pose_from_matrix(a.matrix() @ b.matrix())
    assert_pose_close(got, want)


@given(poses, poses, poses)
def test_compose_associative_via_matrices(a, b, c):
    left = se2_compose(se2_compose(a, b), c)
    want = pose_from_matrix(a.matrix() @ b.matrix() @ c.matrix())
    assert_pose_close(left, want)


@given(poses)
def test_inverse_round_trip(p):
    assert_pose_close(se2_compose(p, se2_inverse(p)), (0, 0, 0))
    assert_pose_close(se2_compose(se2_inverse(p), p), (0, 0, 0))


@given(poses)
def test_inverse_matches_matrix_oracle(p):
    assert_pose_close(se2_inverse(p), pose_from_matrix(np.linalg.inv(p.matrix())))


def test_relative_scripted():
    p = Pose2(3, -1, 0.4)
    assert_pose_close(se2_relative(p, p), (0, 0, 0))
    # sensor advances 1m along x: a world point at src-frame (2,0) is at (1,0) in dst
    t = se2_relative(Pose2(0, 0, 0), Pose2(1, 0, 0))
    np.testing.assert_allclose(se2_apply(t, np.array([2.0, 0.0])), [1.0, 0.0], atol=1e-12)
    # sensor turns +90deg in place: world point at src-frame (1,0) lands at (0,-1)
    t = se2_relative(Pose2(0, 0, 0), Pose2(0, 0, math.pi / 2))
    np.testing.assert_allclose(se2_apply(t, np.array([1.0, 0.0])), [0.0, -1.0], atol=1e-12)


@given(poses, poses, st.lists(st.tuples(finite_coord, finite_coord), min_size=1, max_size=4))
def test_relative_maps_world_points_between_frames(a, b, pts):
    world = np.array(pts, dtype=float)
    in_a = se2_apply(se2_inverse(a), world)
    in_b = se2_apply(se2_inverse(b), world)
    got = se2_apply(se2_relative(a, b), in_a)
    np.testing.assert_allclose(got, in_b, atol=1e-7)


# ---------------------------------------------------------------- GridSpec


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(size_cells=4, cell_size=0.2)
    with pytest.raises(ValueError):
        GridSpec(size_cells=1, cell_size=0.2)
    with pytest.raises(ValueError):
        GridSpec(size_cells=5, cell_size=0.0)
    with pytest.raises(ValueError):
        GridSpec(size_cells=5, cell_size=0.2, max_range=-1.0)


def test_grid_spec_defaults_and_helpers():
    spec = GridSpec(size_cells=5, cell_size=0.25)
    assert spec.max_range == pytest.approx(1.25)
    assert spec.center == 2
    assert spec.half_extent == pytest.approx(0.625)
    assert spec.cell_center(2, 2) == (0.0, 0.0)
    assert spec.cell_center(3, 2) == (0.25, 0.0)
    assert spec.point_cell(0.0, 0.0) == (2, 2)
    # points exactly on a boundary belong to the higher-index cell
    assert spec.point_cell(0.125, 0.0) == (3, 2)
    assert spec.in_grid(0, 4) and not spec.in_grid(-1, 2) and not spec.in_grid(2, 5)


# ---------------------------------------------------------------- ObservationGrid


def test_observation_grid_rejects_occupied_unobserved():
    vis = np.zeros((3, 3), dtype=np.uint8)
    occ = np.zeros((3, 3), dtype=np.uint8)
    occ[1, 1] = 1
    with pytest.raises(ValueError):
        ObservationGrid(vis=vis, occ=occ)


def test_observation_grid_rejects_non_binary():
    bad = np.full((3, 3), 2, dtype=np.uint8)
    with pytest.raises(ValueError):
        ObservationGrid(vis=bad, occ=np.zeros((3, 3), dtype=np.uint8))


def test_observation_grid_planes():
    vis = np.eye(3, dtype=np.uint8)
    g = ObservationGrid(vis=vis, occ=vis.copy())
    planes = g.planes()
    assert planes.shape == (2, 3, 3) and planes.dtype == np.float32
    np.testing.assert_array_equal(planes[0], vis)


# ---------------------------------------------------------------- encoding


def grid5() -> GridSpec:
    return GridSpec(size_cells=5, cell_size=0.25)


def test_encode_empty_ray_list_is_all_zeros():
    g = encode_observation([], grid5())
    assert not g.vis.any() and not g.occ.any()


def test_encode_single_beam_east():
    spec = grid5()
    g = encode_observation([(0.0, 2 * spec.cell_size)], spec)
    vis = np.zeros((5, 5), dtype=np.uint8)
    occ = np.zeros((5, 5), dtype=np.uint8)
    vis[2, 2] = vis[3, 2] = vis[4, 2] = 1
    occ[4, 2] = 1
    np.testing.assert_array_equal(g.vis, vis)
    np.testing.assert_array_equal(g.occ, occ)


def test_encode_axis_conventions():
    spec = grid5()
    r = spec.cell_size
    north = encode_observation([(math.pi / 2, r)], spec)
    assert north.occ[2, 3] == 1
    south = encode_observation([(-math.pi / 2, r)], spec)
    assert south.occ[2, 1] == 1
    west = encode_observation([(math.pi, r)], spec)
    assert west.occ[1, 2] == 1


def test_encode_no_return_marks_free_to_boundary():
    spec = grid5()
    g = encode_observation([(0.0, math.inf)], spec)
    assert not g.occ.any()
    np.testing.assert_array_equal(g.vis[2:, 2], [1, 1, 1])
    assert g.vis.sum() == 3


def test_encode_endpoint_outside_grid_is_no_return():
    spec = grid5()
    g = encode_observation([(0.0, 10 * spec.cell_size)], spec)
    assert not g.occ.any()
    np.testing.assert_array_equal(g.vis[2:, 2], [1, 1, 1])


def test_encode_clips_at_max_range():
    spec = GridSpec(size_cells=5, cell_size=0.25, max_range=0.4)
    g = encode_observation([(0.0, math.inf)], spec)
    # crossings at 0.125 and 0.375 < 0.4: center plus two cells east are walked
    np.testing.assert_array_equal(g.vis[2:, 2], [1, 1, 1])
    assert g.vis.sum() == 3 and not g.occ.any()


def test_encode_hit_exactly_at_max_range_is_occupied():
    spec = GridSpec(size_cells=5, cell_size=0.25, max_range=0.5)
    g = encode_observation([(0.0, 0.5)], spec)
    assert g.occ[4, 2] == 1


def test_encode_range_just_beyond_max_range_is_no_return():
    spec = GridSpec(size_cells=5, cell_size=0.25, max_range=0.5)
    g = encode_observation([(0.0, 0.5000001)], spec)
    assert not g.occ.any()


def test_encode_endpoint_on_cell_boundary_occupies_prior_cell():
    # endpoint exactly on the 1.5-cell boundary: open-interior rule puts the
    # terminal in the nearer cell (cell_size 0.25 keeps the arithmetic exact)
    spec = grid5()
    g = encode_observation([(0.0, 1.5 * spec.cell_size)], spec)
    assert g.occ[3, 2] == 1 and g.occ[4, 2] == 0
    assert g.vis[4, 2] == 0


def test_encode_zero_range_marks_center_only():
    spec = grid5()
    g = encode_observation([(0.0, 0.0)], spec)
    assert g.vis[2, 2] == 1 and g.vis.sum() == 1
    assert not g.occ.any()


def test_encode_center_cell_forced_free():
    spec = grid5()
    g = encode_observation([(0.0, 0.1 * spec.cell_size)], spec)
    assert g.vis[2, 2] == 1 and g.occ[2, 2] == 0


def test_encode_occupied_wins_over_free():
    spec = grid5()
    g = encode_observation([(0.0, math.inf), (0.0, 2 * spec.cell_size)], spec)
    assert g.occ[4, 2] == 1 and g.vis[4, 2] == 1


def test_encode_rejects_bad_rays():
    spec = grid5()
    with pytest.raises(ValueError):
        encode_observation([(0.0, -0.1)], spec)
    with pytest.raises(ValueError):
        encode_observation([(math.nan, 1.0)], spec)
    with pytest.raises(ValueError):
        encode_observation([(math.inf, 1.0)], spec)
    with pytest.raises(ValueError):
        encode_observation([(0.0, math.nan)], spec)


def random_rays(rng: np.random.Generator, spec: GridSpec):
    n = int(rng.integers(0, 24))
    rays = []
    for _ in range(n):
        bearing = float(rng.uniform(-math.pi, math.pi))
        if rng.random() < 0.25:
            rays.append((bearing, math.inf))
        else:
            rays.append((bearing, float(rng.uniform(0.0, 1.4 * spec.max_range))))
    return rays


@pytest.mark.parametrize("seed", range(4))
def test_encode_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    for _ in range(80):
        m = int(rng.choice([3, 5, 7, 9, 11, 13, 15]))
        cs = float(rng.uniform(0.05, 0.6))
        max_r = float(rng.uniform(0.4, 1.5)) * m * cs
        spec = GridSpec(size_cells=m, cell_size=cs, max_range=max_r)
        rays = random_rays(rng, spec)
        got = encode_observation(rays, spec)
        want_vis, want_occ = encode_oracle(rays, spec)
        np.testing.assert_array_equal(got.vis, want_vis)
        np.testing.assert_array_equal(got.occ, want_occ)
        assert not (got.occ > got.vis).any()


@given(
    st.integers(0, 2**32 - 1),
    st.sampled_from([3, 5, 7, 9]),
)
@settings(max_examples=60, deadline=None)
def test_encode_occ_subset_vis_property(seed, m):
    rng = np.random.default_rng(seed)
    spec = GridSpec(size_cells=m, cell_size=float(rng.uniform(0.05, 0.5)))
    g = encode_observation(random_rays(rng, spec), spec)
    assert not (g.occ > g.vis).any()


# ---------------------------------------------------------------- predictable mask


def test_mask_identity_chain_all_ones():
    spec = grid5()
    m = predictable_mask([Pose2.identity()] * 3, spec)
    assert m.mask.all()
    assert predictable_mask([], spec).mask.all()


def test_mask_forward_translation_zeros_leading_edge():
    # sensor advances +3 cells along x; the relative coordinate transform for
    # a world-fixed point is x -> x - 3*cs
    spec = GridSpec(size_cells=7, cell_size=0.25)
    chain = [se2_relative(Pose2(0, 0, 0), Pose2(3 * spec.cell_size, 0, 0))]
    m = predictable_mask(chain, spec).mask
    assert m[:4].all()
    assert not m[4:].any()
    assert int(m.size - m.sum()) == 3 * spec.size_cells


def test_mask_two_step_translation_composes():
    spec = GridSpec(size_cells=7, cell_size=0.25)
    step = se2_relative(Pose2(0, 0, 0), Pose2(2 * spec.cell_size, 0, 0))
    m = predictable_mask([step, step], spec).mask
    assert m[:3].all() and not m[3:].any()
    assert int(m.size - m.sum()) == 4 * spec.size_cells


@pytest.mark.parametrize("n", [1, 2, 4])
@pytest.mark.parametrize("axis", ["+x", "-x", "+y", "-y"])
def test_mask_whole_cell_translation_zero_count(n, axis):
    spec = GridSpec(size_cells=9, cell_size=0.2)
    d = n * spec.cell_size
    dest = {
        "+x": Pose2(d, 0, 0),
        "-x": Pose2(-d, 0, 0),
        "+y": Pose2(0, d, 0),
        "-y": Pose2(0, -d, 0),
    }[axis]
    m = predictable_mask([se2_relative(Pose2(0, 0, 0), dest)], spec).mask
    assert int(m.size - m.sum()) == n * spec.size_cells
    sums = m.sum(axis=1) if "x" in axis else m.sum(axis=0)
    # the zero band hugs the edge in the direction of motion
    if axis in ("+x", "+y"):
        assert (sums[-n:] == 0).all() and (sums[:-n] == spec.size_cells).all()
    else:
        assert (sums[:n] == 0).all() and (sums[n:] == spec.size_cells).all()


def test_mask_monotone_under_forward_motion():
    # moving steadily away, longer chains can only lose cells once shifted
    # into the same frame
    spec = GridSpec(size_cells=9, cell_size=0.2)
    step = se2_relative(Pose2(0, 0, 0), Pose2(spec.cell_size, 0, 0))
    prev = predictable_mask([step], spec).mask
    for k in range(2, 5):
        cur = predictable_mask([step] * k, spec).mask
        # frame t+k cell (i, j) overlaps frame t+k-1 cell (i+1, j)
        assert not (cur[:-1] & ~prev[1:]).any()
        prev = cur


@given(
    st.lists(
        st.builds(
            Pose2,
            st.floats(-1.0, 1.0),
            st.floats(-1.0, 1.0),
            st.floats(-math.pi, math.pi),
        ),
        min_size=0,
        max_size=4,
    )
)
@settings(max_examples=80, deadline=None)
def test_mask_matches_matrix_oracle(chain):
    spec = GridSpec(size_cells=7, cell_size=0.3)
    got = predictable_mask(chain, spec).mask
    np.testing.assert_array_equal(got, mask_oracle(chain, spec))
