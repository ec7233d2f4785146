"""Sample containers, on-disk layout and the procedural toy domain pair.

Layout of a dataset root::

    <root>/manifest.txt        domain=<source|target> cap=<m> h=<H> w=<W> seed=<int>
                               followed by one sample id per line
    <root>/<id>/image.png      8-bit RGB, lossless
    <root>/<id>/depth.f32      b"DPTH", uint32 H, uint32 W, float32 cap, H*W float32
                               (all little-endian, row-major); 0 marks missing depth
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ArgumentError

DOMAINS = ("source", "target")
DEPTH_MAGIC = b"DPTH"
_HEADER = struct.Struct("<4sIIf")
HIST_BINS = 64

TOY_CAP = 80.0
TOY_NOISE_SIGMA = 0.02
TOY_EDGE_BLUR_SIGMA = 1.5


@dataclass
class DepthSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    domain: str
    id: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ArgumentError(f"unknown domain {self.domain!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ArgumentError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.depth.shape != self.image.shape[:2]:
            raise ArgumentError(f"depth {self.depth.shape} does not match image {self.image.shape[:2]}")

    @property
    def labelled(self):
        return bool((self.depth > 0).any())


@dataclass
class DatasetManifest:
    root: Path
    ids: list
    domain: str
    cap: float
    height: int
    width: int
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.ids = list(self.ids)
        if self.domain not in DOMAINS:
            raise ArgumentError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return len(self.ids)

    def header(self):
        return f"domain={self.domain} cap={self.cap:g} h={self.height} w={self.width} seed={self.seed}"

    def write(self):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.txt").write_text("\n".join([self.header(), *self.ids]) + "\n")
        return self

    def subset(self, ids):
        return DatasetManifest(self.root, ids, self.domain, self.cap, self.height, self.width, self.seed)

    def sample(self, sample_id):
        return load_sample(self.root / sample_id, self.domain)

    def samples(self):
        return [self.sample(i) for i in self.ids]

    def arrays(self):
        """Stacked ``(images (N, H, W, 3), depths (N, H, W))``; cached per manifest object."""
        if "arrays" not in self._cache:
            samples = self.samples()
            images = np.stack([s.image for s in samples]) if samples else np.zeros((0, self.height, self.width, 3), np.float32)
            depths = np.stack([s.depth for s in samples]) if samples else np.zeros((0, self.height, self.width), np.float32)
            self._cache["arrays"] = (images, depths)
        return self._cache["arrays"]

    def images(self):
        """Stacked images only; depth files are not opened."""
        if "arrays" in self._cache:
            return self._cache["arrays"][0]
        if not self.ids:
            return np.zeros((0, self.height, self.width, 3), np.float32)
        return np.stack([load_image(self.root / i) for i in self.ids])


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise ArgumentError(f"manifest not found: {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ArgumentError(f"{path}: empty manifest")
    try:
        head = dict(tok.split("=", 1) for tok in lines[0].split())
        return DatasetManifest(
            root=path.parent,
            ids=lines[1:],
            domain=head["domain"],
            cap=float(head["cap"]),
            height=int(head["h"]),
            width=int(head["w"]),
            seed=int(head.get("seed", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise ArgumentError(f"{path}: malformed manifest header {lines[0]!r}") from exc


def write_depth(path, depth, cap):
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DEPTH_MAGIC, h, w, cap))
        fh.write(depth.tobytes())


def read_depth(path):
    """Returns ``(depth, cap)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArgumentError(f"{path}: truncated depth file")
    magic, h, w, cap = _HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise ArgumentError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ArgumentError(f"{path}: expected {h}x{w} floats, found {len(body) // 4}")
    depth = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return depth, cap


def quantize_image(image):
    """Snap to the 8-bit grid so PNG round-trips are bit-exact."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def save_sample(sample: DepthSample, root, cap):
    d = Path(root) / sample.id
    d.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(d / "image.png")
    write_depth(d / "depth.f32", sample.depth, cap)
    return d


def load_image(sample_dir):
    sample_dir = Path(sample_dir)
    try:
        with Image.open(sample_dir / "image.png") as im:
            pixels = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise ArgumentError(f"sample {sample_dir} has no image.png") from exc
    return pixels.astype(np.float32) / 255.0


def load_sample(sample_dir, domain):
    sample_dir = Path(sample_dir)
    image = load_image(sample_dir)
    depth, _ = read_depth(sample_dir / "depth.f32")
    return DepthSample(image=image, depth=depth, domain=domain, id=sample_dir.name)


def cap_depth(depth, cap):
    """Clip depth to ``cap``; zeros (missing) stay zero."""
    if not (isinstance(cap, (int, float, np.floating, np.integer)) and math.isfinite(cap) and cap > 0):
        raise ArgumentError(f"cap must be a finite positive number, got {cap!r}")
    depth = np.asarray(depth)
    return np.where(depth > cap, np.asarray(cap, dtype=depth.dtype), depth)


# --- distribution filtering -------------------------------------------------

def histogram_edges(cap, bins=HIST_BINS):
    return np.linspace(0.0, float(cap), bins + 1)


def depth_histogram(depth, edges):
    """Normalised histogram of the valid (> 0) depths over ``edges``."""
    d = np.asarray(depth, dtype=np.float64).ravel()
    d = d[d > 0]
    counts, _ = np.histogram(d, bins=edges)
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def chi_square_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    s = p + q
    nz = s > 0
    return 0.5 * float(np.sum((p[nz] - q[nz]) ** 2 / s[nz]))


def rank_by_histogram_distance(histograms, ids, reference, keep):
    """Ids of the ``keep`` histograms closest to ``reference``; ties broken by id."""
    dist = [chi_square_distance(h, reference) for h in histograms]
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    return [ids[i] for i in order[:keep]]


def filter_by_depth_distribution(source: DatasetManifest, target_reference_histograms, keep, edges=None):
    """Keep the source samples whose depth histogram best matches the mean target histogram.

    ``target_reference_histograms`` is one histogram or a stack of them, all
    over ``edges`` (default: 64 uniform bins on (0, cap]).
    """
    edges = histogram_edges(source.cap) if edges is None else np.asarray(edges, dtype=np.float64)
    ref = np.atleast_2d(np.asarray(target_reference_histograms, dtype=np.float64))
    if ref.size == 0 or not ref.sum() > 0:
        raise ArgumentError("reference histogram is empty")
    if ref.shape[1] != len(edges) - 1:
        raise ArgumentError(f"reference has {ref.shape[1]} bins, edges define {len(edges) - 1}")
    if not 0 <= keep <= len(source):
        raise ArgumentError(f"keep={keep} outside [0, {len(source)}]")
    ref = ref / ref.sum(axis=1, keepdims=True).clip(min=1e-300)
    mean_ref = ref.mean(axis=0)
    _, depths = source.arrays()
    hists = [depth_histogram(d, edges) for d in depths]
    return source.subset(rank_by_histogram_distance(hists, source.ids, mean_ref, keep))


# --- toy domain pair --------------------------------------------------------

_PALETTE_A = np.array([
    [0.85, 0.20, 0.15],
    [0.20, 0.55, 0.85],
    [0.95, 0.80, 0.20],
    [0.30, 0.75, 0.30],
    [0.70, 0.35, 0.75],
    [0.90, 0.55, 0.25],
], dtype=np.float64)
_GROUND_A = np.array([0.45, 0.42, 0.38])
_FOG_A = np.array([0.80, 0.85, 0.92])

# target: rotate the palette channels, tint towards cold light, darker ground, warmer haze
_TARGET_GAIN = np.array([0.80, 0.95, 1.15])


def _palette(domain):
    if domain == "source":
        return _PALETTE_A, _GROUND_A, _FOG_A
    palette = np.clip(_PALETTE_A[:, [1, 2, 0]] * _TARGET_GAIN, 0, 1)
    ground = np.clip(_GROUND_A[[2, 0, 1]] * _TARGET_GAIN * 0.8, 0, 1)
    fog = np.clip(np.array([0.92, 0.84, 0.70]) * _TARGET_GAIN, 0, 1)
    return palette, ground, fog


def render_scene(rng, height, width, domain, cap=TOY_CAP):
    """Render one procedural street-like scene; returns ``(image, depth)``.

    A ground plane seen from a camera 1.6 m high meets a far backdrop at the
    horizon; rectangles and ellipses stand on the ground at sampled depths,
    sized by perspective and hazed by distance.
    """
    focal = float(width)
    cam_h = 1.6
    horizon = height * rng.uniform(0.35, 0.45)
    far = rng.uniform(50.0, cap)
    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5

    below = rows - horizon
    ground_depth = np.where(below > 0, focal * cam_h / np.maximum(below, 1e-6), np.inf)
    depth = np.minimum(np.broadcast_to(ground_depth, (height, width)), far).copy()
    is_ground = np.broadcast_to(ground_depth < far, (height, width))

    palette, ground_rgb, fog_rgb = _palette(domain)
    image = np.empty((height, width, 3))
    # ground checkerboard fixed in world coordinates
    x_world = (cols - width / 2) * depth / focal
    checker = (np.floor(x_world / 2.0) + np.floor(depth / 3.0)) % 2
    ground_col = ground_rgb * (0.8 + 0.25 * checker)[..., None]
    sky_col = fog_rgb * (0.9 + 0.1 * (rows / height))[..., None] * np.ones((1, width, 1))
    image[:] = np.where(is_ground[..., None], ground_col, sky_col)

    n_obj = int(rng.integers(3, 7))
    objs = []
    for _ in range(n_obj):
        d = rng.uniform(5.0, 45.0)
        objs.append((
            d,
            rng.uniform(1.0, 4.0),             # height in m
            rng.uniform(0.8, 3.0),             # width in m
            rng.uniform(0, width),             # horizontal centre in px
            bool(rng.integers(0, 2)),          # ellipse?
            int(rng.integers(0, len(palette))),
            rng.uniform(0.5, 2.0),             # stripe period in m
        ))
    for d, hm, wm, cx, ellipse, ci, period in sorted(objs, key=lambda o: -o[0]):
        bottom = horizon + focal * cam_h / d
        top = bottom - focal * hm / d
        half_w = focal * wm / d / 2
        if ellipse:
            cy, ry = (top + bottom) / 2, (bottom - top) / 2
            mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / half_w) ** 2 <= 1.0
        else:
            mask = (rows >= top) & (rows < bottom) & (np.abs(cols - cx) <= half_w)
        if not mask.any():
            continue
        stripes = 0.85 + 0.15 * np.sin(2 * np.pi * (rows * d / focal) / period)
        col = palette[ci] * stripes[..., None] * np.ones((1, width, 1))
        depth[mask] = d
        image[mask] = col[mask]

    fog = 1.0 - np.exp(-depth / 40.0)
    image = (1 - fog[..., None]) * image + fog[..., None] * fog_rgb
    depth = np.minimum(depth, cap)

    if domain == "target":
        edges = ndimage.sobel(depth, 0) ** 2 + ndimage.sobel(depth, 1) ** 2 > 1e-6
        band = ndimage.binary_dilation(edges, iterations=3)
        blurred = ndimage.gaussian_filter(depth, TOY_EDGE_BLUR_SIGMA, mode="nearest")
        depth = np.where(band, blurred, depth)
        image = image + rng.normal(0.0, TOY_NOISE_SIGMA, image.shape)

    return quantize_image(image), np.clip(depth, 1e-3, cap).astype(np.float32)


def _render_split(seq, n, resolution, domain, prefix):
    h, w = resolution
    out = []
    for i, child in enumerate(seq.spawn(n)):
        image, depth = render_scene(np.random.default_rng(child), h, w, domain)
        out.append(DepthSample(image, depth, domain, f"{prefix}{i:05d}"))
    return out


def generate_toy_domain_pair(seed, n_source, n_target, resolution, root, n_test=0):
    """Write a labelled source set and an unlabelled target set under ``root``.

    Besides ``root/source`` and ``root/target`` (all-zero depth), the target
    ground truth goes to ``root/target_gt`` and an optional held-out labelled
    target split of ``n_test`` scenes to ``root/target_test``; both are for
    evaluation only. Returns ``(source_manifest, target_manifest)``.
    """
    if n_source < 1 or n_target < 1 or n_test < 0:
        raise ArgumentError("n_source and n_target must be >= 1, n_test >= 0")
    h, w = (int(v) for v in resolution)
    if h < 32 or w < 32:
        raise ArgumentError(f"resolution must be at least 32x32, got {h}x{w}")
    root = Path(root)
    src_seq, tgt_seq, test_seq = np.random.SeedSequence(seed).spawn(3)

    def write(name, domain, samples):
        m = DatasetManifest(root / name, [s.id for s in samples], domain, TOY_CAP, h, w, seed)
        for s in samples:
            save_sample(s, m.root, TOY_CAP)
        return m.write()

    source = write("source", "source", _render_split(src_seq, n_source, (h, w), "source", "s"))
    gt = _render_split(tgt_seq, n_target, (h, w), "target", "t")
    write("target_gt", "target", gt)
    target = write("target", "target", [
        DepthSample(s.image, np.zeros_like(s.depth), "target", s.id) for s in gt
    ])
    if n_test:
        write("target_test", "target", _render_split(test_seq, n_test, (h, w), "target", "v"))
    return source, target
