import filecmp
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from depthadapt.dataset import (
    DatasetManifest,
    DepthSample,
    cap_depth,
    chi_square_distance,
    depth_histogram,
    filter_by_depth_distribution,
    generate_toy_domain_pair,
    histogram_edges,
    load_manifest,
    load_sample,
    quantize_image,
    read_depth,
    save_sample,
)
from depthadapt.exceptions import ArgumentError


def test_cap_depth_examples():
    np.testing.assert_array_equal(cap_depth(np.array([10.0, 90.0, 0.0]), 80), [10, 80, 0])
    np.testing.assert_allclose(cap_depth(np.array([7.9, 8.1], np.float32), 8), [7.9, 8.0], rtol=1e-6)


@pytest.mark.parametrize("cap", [0, -1, float("inf"), float("nan")])
def test_cap_depth_rejects_bad_caps(cap):
    with pytest.raises(ArgumentError):
        cap_depth(np.ones(3), cap)


@given(arrays(np.float64, 16, elements=st.floats(0, 200)), st.floats(0.1, 150))
def test_cap_depth_idempotent_and_keeps_zeros(d, c):
    once = cap_depth(d, c)
    np.testing.assert_array_equal(cap_depth(once, c), once)
    assert np.all(once[d == 0] == 0)
    assert once.max(initial=0) <= c


def test_depth_file_layout(tmp_path):
    depth = np.arange(12, dtype=np.float32).reshape(3, 4)
    s = DepthSample(np.zeros((3, 4, 3), np.float32), depth, "source", "a")
    save_sample(s, tmp_path, 80.0)
    raw = (tmp_path / "a" / "depth.f32").read_bytes()
    magic, h, w, cap = struct.unpack("<4sIIf", raw[:16])
    assert (magic, h, w, cap) == (b"DPTH", 3, 4, 80.0)
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4").reshape(3, 4), depth)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sample_round_trip_bit_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    img = quantize_image(rng.random((5, 7, 3)))
    depth = (rng.random((5, 7)) * 80).astype(np.float32)
    depth[0, 0] = 0
    root = tmp_path_factory.mktemp("rt")
    save_sample(DepthSample(img, depth, "target", "x"), root, 80.0)
    back = load_sample(root / "x", "target")
    assert back.image.dtype == np.float32 and back.depth.dtype == np.float32
    assert np.array_equal(back.image, img)
    assert np.array_equal(back.depth, depth)


def test_sample_invariants():
    with pytest.raises(ArgumentError):
        DepthSample(np.zeros((4, 4, 3)), np.zeros((4, 5)), "source", "a")
    with pytest.raises(ArgumentError):
        DepthSample(np.zeros((4, 4, 3)), np.zeros((4, 4)), "elsewhere", "a")


@pytest.fixture(scope="module")
def toy7(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy7")
    return root, generate_toy_domain_pair(7, 16, 16, (64, 96), root)


def test_toy_generation_manifests(toy7):
    root, (src, tgt) = toy7
    assert len(src) == 16 and len(tgt) == 16
    assert src.domain == "source" and tgt.domain == "target"
    head = (root / "source" / "manifest.txt").read_text().splitlines()[0]
    assert head == "domain=source cap=80 h=64 w=96 seed=7"
    for m in (src, tgt):
        reread = load_manifest(m.root)
        assert reread.ids == m.ids and (reread.height, reread.width) == (64, 96)
    _, sd = src.arrays()
    assert all((d > 0).any() for d in sd)
    assert sd.max() <= src.cap and sd.min() >= 0
    # training-visible target carries no labels; ground truth lives next to it
    _, td = tgt.arrays()
    assert not td.any()
    gt = load_manifest(root / "target_gt")
    assert gt.ids == tgt.ids and (gt.arrays()[1] > 0).all()
    np.testing.assert_array_equal(gt.arrays()[0], tgt.arrays()[0])


def test_toy_generation_deterministic(toy7, tmp_path):
    root, _ = toy7
    generate_toy_domain_pair(7, 16, 16, (64, 96), tmp_path)
    for sub in ("source", "target", "target_gt"):
        cmp = filecmp.dircmp(root / sub, tmp_path / sub)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for d in cmp.common_dirs:
            assert not cmp.subdirs[d].diff_files
            for name in ("image.png", "depth.f32"):
                assert (root / sub / d / name).read_bytes() == (tmp_path / sub / d / name).read_bytes()


def test_toy_generation_seed_changes_data(toy7, tmp_path):
    _, (src7, _) = toy7
    src8, _ = generate_toy_domain_pair(8, 16, 16, (64, 96), tmp_path)
    assert not np.array_equal(src7.arrays()[0], src8.arrays()[0])


def test_toy_target_has_softer_depth_edges(toy7):
    root, (src, _) = toy7
    gt = load_manifest(root / "target_gt")

    def boundary_gradient(depths):
        vals = []
        for d in depths:
            mag = np.hypot(ndimage.sobel(d.astype(np.float64), 0), ndimage.sobel(d.astype(np.float64), 1))
            vals.append(mag[mag >= np.quantile(mag, 0.95)].mean())
        return np.mean(vals)

    assert boundary_gradient(gt.arrays()[1]) < boundary_gradient(src.arrays()[1])


@pytest.mark.parametrize("args", [(7, 0, 4, (64, 96)), (7, 4, 0, (64, 96)), (7, 4, 4, (31, 96)), (7, 4, 4, (64, 16))])
def test_toy_generation_argument_errors(tmp_path, args):
    with pytest.raises(ArgumentError):
        generate_toy_domain_pair(*args, root=tmp_path)


# --- distribution filter ---

def _write_manifest(root, depths, cap=10.0):
    ids = []
    for i, d in enumerate(depths):
        sid = f"s{i:02d}"
        save_sample(DepthSample(np.zeros(d.shape + (3,), np.float32), d.astype(np.float32), "source", sid), root, cap)
        ids.append(sid)
    return DatasetManifest(root, ids, "source", cap, *depths[0].shape).write()


def test_filter_identical_distribution_keeps_all(tmp_path):
    d = np.linspace(0.5, 9.5, 64).reshape(8, 8)
    m = _write_manifest(tmp_path, [d, d, d])
    edges = histogram_edges(10.0)
    out = filter_by_depth_distribution(m, depth_histogram(d, edges), keep=3)
    assert out.ids == ["s00", "s01", "s02"]


def test_filter_picks_exact_match(tmp_path):
    near = np.full((8, 8), 2.0)
    far = np.full((8, 8), 9.0)
    m = _write_manifest(tmp_path, [far, near])
    ref = depth_histogram(near, histogram_edges(10.0))
    assert filter_by_depth_distribution(m, ref, keep=1).ids == ["s01"]


def test_filter_matches_brute_force(tmp_path):
    rng = np.random.default_rng(3)
    depths = [rng.uniform(0.1, rng.uniform(1, 10), (8, 8)) for _ in range(10)]
    m = _write_manifest(tmp_path, depths)
    edges = histogram_edges(10.0)
    refs = np.stack([np.histogram(rng.uniform(0.1, 4, 200), edges)[0] for _ in range(3)]).astype(float)

    # independent oracle: explicit loops over bins
    refn = refs / refs.sum(1, keepdims=True)
    mean_ref = refn.mean(0)
    dist = {}
    for sid, d in zip(m.ids, depths):
        counts = [0] * 64
        for v in d.astype(np.float32).ravel():
            if v > 0:
                counts[min(int(v / 10.0 * 64), 63)] += 1
        p = [c / sum(counts) for c in counts]
        dist[sid] = 0.5 * sum((a - b) ** 2 / (a + b) for a, b in zip(p, mean_ref) if a + b > 0)
    expected = sorted(dist, key=lambda s: (dist[s], s))[:3]

    out = filter_by_depth_distribution(m, refs, keep=3)
    assert out.ids == expected
    assert set(out.ids) <= set(m.ids) and len(out) == 3


def test_filter_errors(tmp_path):
    m = _write_manifest(tmp_path, [np.ones((8, 8))])
    with pytest.raises(ArgumentError):
        filter_by_depth_distribution(m, np.zeros(64), keep=1)
    with pytest.raises(ArgumentError):
        filter_by_depth_distribution(m, np.ones(32), keep=1)
    with pytest.raises(ArgumentError):
        filter_by_depth_distribution(m, np.ones(64), keep=2)


def test_chi_square_basic():
    assert chi_square_distance([0.5, 0.5], [0.5, 0.5]) == 0
    assert chi_square_distance([1, 0], [0, 1]) == pytest.approx(1.0)
