import numpy as np
import pytest

from oracles import naive_displacement
from vesselforge.elastic import (
    ControlGrid,
    DisplacementField,
    densify_field,
    random_deform,
    sample_control_grid,
    warp_mask,
)
from vesselforge.errors import DimsMismatch, InvalidParam
from vesselforge.maskgrid import VoxelMask, connected_components, save_vmsk
from vesselforge.synthgen import SynthParams, generate_case
from vesselforge.treeprune import prune_mask


def blob(dims=(30, 24, 20), lo=(10, 8, 6), hi=(16, 13, 11)):
    vox = np.zeros(dims, bool)
    vox[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    vox[12, 13, 8] = True  # break symmetry
    return VoxelMask(vox)


def test_zero_max_disp_gives_zero_grid():
    g = sample_control_grid(7, 4, 0.0)
    assert g.displacements.shape == (6, 6, 6, 3)
    assert not g.displacements.any()


def test_sampling_is_deterministic():
    a = sample_control_grid(42, 4, 90.0)
    b = sample_control_grid(42, 4, 90.0)
    assert np.array_equal(a.displacements, b.displacements)
    assert not np.array_equal(a.displacements, sample_control_grid(43, 4, 90.0).displacements)


def test_border_layer_is_zero_and_interior_bounded():
    g = sample_control_grid(3, 5, 90.0)
    d = g.displacements
    inner = d[1:-1, 1:-1, 1:-1]
    border = d.copy()
    border[1:-1, 1:-1, 1:-1] = 0
    assert not border.any()
    assert np.abs(inner).max() <= 90.0


def test_uniform_sampler_statistics():
    comps = np.concatenate(
        [sample_control_grid(s, 5, 90.0).displacements[1:-1, 1:-1, 1:-1].ravel() for s in range(27)]
    )[:10_000]
    assert comps.size == 10_000
    assert comps.min() < -80 and comps.max() > 80
    assert np.all(np.abs(comps) <= 90)


@pytest.mark.parametrize("anchors, disp", [(1, 10.0), (4, -1.0), (2.5, 3.0)])
def test_sampling_rejects_bad_params(anchors, disp):
    with pytest.raises(InvalidParam):
        sample_control_grid(0, anchors, disp)


def test_zero_grid_densifies_to_zero():
    f = densify_field(sample_control_grid(0, 4, 0.0), (17, 9, 12))
    assert f.dims == (17, 9, 12) and not f.vectors.any()


def constant_grid(n, c):
    d = np.zeros((n + 2,) * 3 + (3,))
    d[1:-1, 1:-1, 1:-1] = c
    return ControlGrid(n, d, float(np.abs(c).max()), 0)


def test_constant_interior_is_bounded_and_reached_in_the_middle():
    c = np.array([3.0, -2.0, 1.5])
    dims = (61, 61, 61)
    f = densify_field(constant_grid(5, c), dims).vectors
    assert np.all(np.linalg.norm(f, axis=-1) <= np.linalg.norm(c) + 1e-12)
    assert np.allclose(f[30, 30, 30], c, atol=1e-12)
    assert np.linalg.norm(f[0, 0, 0]) < 0.1 * np.linalg.norm(c)


@pytest.mark.parametrize("anchors, dims", [(4, (40, 33, 29)), (5, (25, 41, 18)), (2, (1, 9, 14))])
def test_densify_matches_naive_weighted_sum(anchors, dims):
    g = sample_control_grid(11, anchors, 90.0)
    f = densify_field(g, dims).vectors
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = tuple(int(rng.integers(d)) for d in dims)
        ref = naive_displacement(g.displacements, dims, v)
        assert np.allclose(f[v], ref, rtol=1e-6, atol=1e-9)


def test_densify_is_linear():
    g = sample_control_grid(5, 4, 30.0)
    g2 = ControlGrid(4, 2 * g.displacements, 60.0, 5)
    a = densify_field(g, (20, 21, 22)).vectors
    b = densify_field(g2, (20, 21, 22)).vectors
    assert np.allclose(b, 2 * a, rtol=0, atol=1e-12)


def test_field_respects_displacement_bound():
    for seed in range(5):
        g = sample_control_grid(seed, 4 + seed % 2, 90.0)
        f = densify_field(g, (60, 50, 40))
        assert np.all(f.max_abs() <= 90.0 + 1e-9)


def test_zero_field_warp_is_identity():
    m = blob()
    f = DisplacementField(np.zeros(m.dims + (3,)))
    assert warp_mask(m, f) == m
    assert warp_mask(m, f, "nearest") == m


def test_integer_translation_is_exact():
    m = blob()
    vec = np.zeros(m.dims + (3,))
    vec[..., 0] = 3.0
    out = warp_mask(m, DisplacementField(vec))
    # out(x) = in(x + 3): content moves by -3 along x, entering zeros at the far face
    expected = np.zeros(m.dims, bool)
    expected[:-3] = m.voxels[3:]
    assert np.array_equal(out.voxels, expected)
    assert np.array_equal(warp_mask(m, DisplacementField(vec), "nearest").voxels, expected)


def test_single_voxel_stays_within_displacement_bound():
    dims = (200, 40, 40)
    vox = np.zeros(dims, bool)
    vox[100, 20, 20] = True
    m = VoxelMask(vox)
    for seed in range(4):
        g = sample_control_grid(seed, 4, 90.0)
        out = warp_mask(m, densify_field(g, dims), "nearest")
        pts = np.argwhere(out.voxels)
        if len(pts):
            cheb = np.abs(pts - [100, 20, 20]).max(axis=1)
            assert cheb.max() <= 90


def test_half_voxel_shift_thresholds_inclusively():
    vox = np.zeros((4, 1, 1), bool)
    vox[1] = True
    vec = np.zeros((4, 1, 1, 3))
    vec[..., 0] = 0.5
    out = warp_mask(VoxelMask(vox), DisplacementField(vec)).voxels[:, 0, 0]
    # x=0 samples 0.5 (half weight on voxel 1), x=1 samples 1.5 (half weight)
    assert out.tolist() == [True, True, False, False]


def test_warp_dims_mismatch():
    with pytest.raises(DimsMismatch):
        warp_mask(blob(), DisplacementField(np.zeros((3, 3, 3, 3))))
    with pytest.raises(InvalidParam):
        warp_mask(blob(), DisplacementField(np.zeros(blob().dims + (3,))), "cubic")


def test_random_deform_is_byte_deterministic():
    m = generate_case(SynthParams(dims=(91, 103, 103), spacing=(2.0, 2.0, 2.0), seed=1)).mask
    a = save_vmsk(random_deform(m, 99, 5, 45.0))
    b = save_vmsk(random_deform(m, 99, 5, 45.0))
    assert a == b


@pytest.mark.parametrize("seed, anchors", [(0, 4), (1, 5), (2, 4), (3, 5)])
def test_realism_proxy_on_atlas_masks(seed, anchors):
    case = generate_case(SynthParams(seed=seed))
    m = prune_mask(case.mask, case.graph)
    out = random_deform(m, 1000 + seed, anchors, 90.0)
    ratio = out.foreground_count / m.foreground_count
    assert 0.5 < ratio < 1.5
    st = connected_components(out)
    assert st.component_sizes[0] >= 0.5 * out.foreground_count
