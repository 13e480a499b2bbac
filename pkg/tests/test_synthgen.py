from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from oracles import point_segment_distance
from vesselforge.errors import InvalidParam, OutOfExtent, TooShallow
from vesselforge.manifest import Manifest
from vesselforge.maskgrid import mirror_sagittal
from vesselforge.pipeline import COHORT_MIX, cmd_synth, draw_labels
from vesselforge.synthgen import (
    SynthParams,
    apply_lvo,
    generate_case,
    generate_tree,
    rasterize_tree,
)
from vesselforge.treeprune import CenterlineGraph, carve_mask, node_in_extent

HALF = SynthParams(dims=(91, 103, 103), spacing=(2.0, 2.0, 2.0))
TINY = SynthParams(dims=(46, 52, 52), spacing=(4.0, 4.0, 4.0), branch_depth=4)


def halves(mask):
    mid = mask.dims[0] // 2
    v = mask.voxels
    return int(v[:mid].sum()), int(v[mid + mask.dims[0] % 2:].sum())


def test_depth_zero_is_a_bare_trunk():
    g = generate_tree(replace(HALF, branch_depth=0, include_sinus=False))
    deg = {n: 0 for n in g.nodes}
    for e in g.edges:
        deg[e.a] += 1
        deg[e.b] += 1
    assert max(deg.values()) <= 2
    assert sum(d == 1 for d in deg.values()) == 2


def test_tree_is_deterministic_in_seed():
    a, b = generate_tree(replace(HALF, seed=9)), generate_tree(replace(HALF, seed=9))
    assert a == b
    assert a != generate_tree(replace(HALF, seed=10))


def test_invalid_params():
    for bad in (
        replace(HALF, segment_len_mm=6.0),
        replace(HALF, radius_decay=1.0),
        replace(HALF, lvo_class="both"),
        replace(HALF, branch_depth=-1),
        replace(HALF, root_radius_mm=0.0),
    ):
        with pytest.raises(InvalidParam):
            generate_tree(bad)


def test_hundred_trees_respect_segment_length_and_extent():
    for seed in range(100):
        p = replace(HALF, seed=seed, segment_len_mm=[4.0, 5.0, 2.5][seed % 3])
        g = generate_tree(p)
        assert max(g.edge_length(e) for e in g.edges) <= p.segment_len_mm
        assert all(node_in_extent(q, p.dims, p.spacing) for q in g.nodes.values())
        assert g.seeds


def test_radii_decay_by_generation():
    g = generate_tree(replace(HALF, seed=4, include_sinus=False))
    radii = sorted({round(e.radius_mm, 9) for e in g.edges}, reverse=True)
    r0 = HALF.root_radius_mm
    expected = [round(r0 * HALF.radius_decay**k, 9) for k in range(len(radii))]
    assert radii == expected


@pytest.mark.parametrize("seed", range(6))
def test_left_lvo_only_thins_the_left_half(seed):
    p = replace(HALF, seed=100 + seed)
    g = generate_tree(p)
    full = rasterize_tree(g, p.dims, p.spacing)
    cut = rasterize_tree(apply_lvo(g, "left", seed, p.midline_mm), p.dims, p.spacing)
    (l0, r0), (l1, r1) = halves(full), halves(cut)
    assert l1 < l0
    assert r1 == r0


def test_right_lvo_is_the_mirror_image_of_left():
    p = replace(HALF, seed=55)
    g = generate_tree(p)
    full = rasterize_tree(g, p.dims, p.spacing)
    cut = rasterize_tree(apply_lvo(g, "right", 1, p.midline_mm), p.dims, p.spacing)
    (l0, r0), (l1, r1) = halves(full), halves(cut)
    assert r1 < r0 and l1 == l0


def test_apply_lvo_on_shallow_tree():
    g = generate_tree(replace(HALF, branch_depth=1, seed=3))
    for side in ("left", "right"):
        with pytest.raises(TooShallow):
            apply_lvo(g, side, 0)
    with pytest.raises(TooShallow):
        generate_case(replace(HALF, branch_depth=1, lvo_class="right"), max_attempts=3)


def asymmetry(mask):
    left, right = halves(mask)
    return (left - right) / max(1, left + right)


def test_mirrored_left_lvo_looks_like_right_lvo():
    mirrored = [asymmetry(mirror_sagittal(generate_case(replace(TINY, lvo_class="left", seed=s)).mask)) for s in range(20)]
    right = [asymmetry(generate_case(replace(TINY, lvo_class="right", seed=500 + s)).mask) for s in range(20)]
    left = [asymmetry(generate_case(replace(TINY, lvo_class="left", seed=900 + s)).mask) for s in range(20)]
    assert mannwhitneyu(mirrored, right).pvalue > 0.01
    # the index does see the hemisphere, otherwise the comparison above is vacuous
    assert mannwhitneyu(left, right).pvalue < 0.01


def test_rasterize_examples():
    g = CenterlineGraph({0: (3, 5, 5)}, (), {0})
    assert rasterize_tree(g, (10, 10, 10), (1.0, 1.0, 1.0)).foreground_count == 0
    tube = CenterlineGraph({0: (2, 5, 5), 1: (12, 5, 5)}, ((0, 1, 1.0),), {0})
    m = rasterize_tree(tube, (15, 11, 11), (1.0, 1.0, 1.0))
    pts = np.argwhere(m.voxels)
    assert all(point_segment_distance(p, (2, 5, 5), (12, 5, 5)) <= 1.0 for p in pts)
    # cross-section at x=7 is a plus of 5 voxels: diameter 3 along y and z
    assert m.voxels[7].sum() == 5
    assert m.voxels[7, 4:7, 5].all() and m.voxels[7, 5, 4:7].all()
    with pytest.raises(OutOfExtent):
        rasterize_tree(tube, (8, 11, 11), (1.0, 1.0, 1.0))


def test_rasterize_matches_point_segment_oracle():
    p = replace(TINY, seed=2)
    g = generate_tree(p)
    m = rasterize_tree(g, p.dims, p.spacing)
    rng = np.random.default_rng(0)
    s = np.asarray(p.spacing)
    for v in rng.integers(0, p.dims, size=(400, 3)):
        c = v * s
        inside = any(
            point_segment_distance(c, g.nodes[e.a], g.nodes[e.b]) <= e.radius_mm for e in g.edges
        )
        assert m.voxels[tuple(v)] == inside
    for v in np.argwhere(m.voxels)[:200]:
        c = v * s
        assert any(point_segment_distance(c, g.nodes[e.a], g.nodes[e.b]) <= e.radius_mm for e in g.edges)


@pytest.mark.parametrize("lvo", ["none", "left"])
def test_rasterize_then_carve_is_identity(lvo):
    case = generate_case(replace(HALF, seed=31, lvo_class=lvo))
    assert carve_mask(case.mask, case.graph) == case.mask


def test_lvo_case_is_thinner_than_its_untruncated_tree():
    p = replace(HALF, seed=77, lvo_class="right")
    case = generate_case(p)
    intact = rasterize_tree(generate_tree(replace(p, lvo_class="none")), p.dims, p.spacing)
    assert halves(case.mask)[1] < halves(intact)[1]
    assert case.label == "right"


def test_cohort_mix_label_counts_within_three_sigma():
    n = 168
    target = np.array([59, 54, 52]) / 165
    for seed in range(5):
        labels = draw_labels(n, COHORT_MIX, seed)
        counts = np.array([labels.count(c) for c in ("none", "left", "right")])
        sigma = np.sqrt(n * target * (1 - target))
        assert np.all(np.abs(counts - n * target) <= 3 * sigma)
        # also against the raw cohort counts
        assert np.all(np.abs(counts - [59, 54, 52]) <= 3 * sigma)


def test_draw_labels_rejects_bad_mix():
    with pytest.raises(InvalidParam):
        draw_labels(5, (0.5, 0.5, 0.5))
    with pytest.raises(InvalidParam):
        draw_labels(5, (1.0, 0.0))


def test_dataset_all_none_and_deterministic(tmp_path):
    m = cmd_synth(10, (1, 0, 0), tmp_path / "a", seed=4, params=TINY)
    assert [r.label for r in m] == ["none"] * 10
    m2 = cmd_synth(10, (1, 0, 0), tmp_path / "b", seed=4, params=TINY)
    for r in Manifest.read(tmp_path / "a" / "manifest.jsonl"):
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
        assert (tmp_path / "a" / r.graph_path).read_bytes() == (tmp_path / "b" / r.graph_path).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert len(m2) == 10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_occupancy_is_realistic(seed):
    mask = generate_case(SynthParams(seed=seed)).mask
    frac = mask.foreground_count / mask.size
    assert 0.002 <= frac <= 0.02
