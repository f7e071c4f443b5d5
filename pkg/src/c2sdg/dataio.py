"""Synthetic multi-domain benchmark generation, netpbm codecs, dataset index.

The benchmark stands in for a multi-center fundus dataset: every domain
shares one geometry distribution (a bright elliptical disc with a brighter
cup strictly inside, plus unlabeled distractor blobs and a smooth background
gradient) while the appearance differs per domain (gamma, per-channel color
cast, noise, blur, background texture). Masks are rasterized from the
geometry before any styling, so identical geometry streams give bitwise
identical masks across domains - the premise of single-domain
generalization, same structure under different style.

Images are stored as binary PPM (P6, maxval 255), masks as binary PGM
(P5, maxval 255, encoded 0/255 and read back with a threshold at 128).
Dataset layout: ``root/<domain>/<id>.ppm`` with ``<id>_od.pgm`` and
``<id>_oc.pgm`` beside it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .seeding import TAG_DOMAIN_STYLE, TAG_GEOMETRY, derive_rng, stable_name_hash


@dataclass
class DomainSpec:
    """Appearance knobs of one synthetic domain (structure is shared)."""

    name: str
    gamma: float = 1.0
    color_cast: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.02
    blur_sigma: float = 0.4
    texture_freq: float = 4.0
    texture_amp: float = 0.05

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("domain name must be non-empty")
        if self.gamma <= 0:
            raise ConfigError(f"domain {self.name}: gamma must be positive")
        if len(self.color_cast) != 3 or min(self.color_cast) <= 0:
            raise ConfigError(f"domain {self.name}: color_cast needs 3 positive values")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.texture_amp < 0:
            raise ConfigError(f"domain {self.name}: sigmas and texture_amp must be >= 0")


@dataclass
class GeometrySpec:
    """Shared shape distribution (fractions of the image side)."""

    disc_radius: tuple[float, float] = (0.20, 0.28)
    cup_ratio: tuple[float, float] = (0.50, 0.68)
    eccentricity: tuple[float, float] = (0.75, 1.0)
    center_jitter: float = 0.08
    edge_softness: float = 1.5      # pixels
    n_distractors: tuple[int, int] = (2, 5)
    distractor_amp: tuple[float, float] = (0.05, 0.13)


@dataclass
class BenchmarkSpec:
    size: int = 64
    train_per_domain: int = 60
    test_per_domain: int = 20
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    domains: list[DomainSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.size < 16 or self.size & (self.size - 1):
            raise ConfigError(f"image size must be a power of two >= 16, got {self.size}")
        if self.train_per_domain < 1 or self.test_per_domain < 0:
            raise ConfigError("per-domain sample counts must be positive")
        if not self.domains:
            raise ConfigError("benchmark spec needs at least one domain")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")
        for d in self.domains:
            d.validate()


def default_benchmark_spec() -> BenchmarkSpec:
    """Four domains: one source-like appearance, three strong style shifts.

    Target styles are severe enough to hurt a source-only model but stay
    within the family of appearance changes (gamma, noise, blur, spectra)
    that style augmentation can plausibly span - shifted acquisition, not
    adversarial corruption.
    """
    return BenchmarkSpec(domains=[
        DomainSpec("a_clean", gamma=1.0, color_cast=(1.0, 1.0, 1.0),
                   noise_sigma=0.02, blur_sigma=0.4, texture_freq=3.0, texture_amp=0.05),
        DomainSpec("b_bright", gamma=0.45, color_cast=(1.25, 1.0, 0.75),
                   noise_sigma=0.05, blur_sigma=0.9, texture_freq=6.0, texture_amp=0.08),
        DomainSpec("c_noisy", gamma=1.9, color_cast=(0.75, 0.95, 1.25),
                   noise_sigma=0.09, blur_sigma=0.1, texture_freq=11.0, texture_amp=0.10),
        DomainSpec("d_dim", gamma=1.6, color_cast=(0.85, 1.15, 0.9),
                   noise_sigma=0.04, blur_sigma=1.2, texture_freq=2.0, texture_amp=0.12),
    ])


def load_benchmark_spec(path) -> BenchmarkSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec file {path} is not valid JSON: {exc}") from exc
    geometry = GeometrySpec(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in doc.get("geometry", {}).items()})
    domains = [DomainSpec(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in d.items()})
               for d in doc.get("domains", [])]
    spec = BenchmarkSpec(size=doc.get("size", 64),
                         train_per_domain=doc.get("train_per_domain", 60),
                         test_per_domain=doc.get("test_per_domain", 20),
                         geometry=geometry, domains=domains)
    spec.validate()
    return spec


def save_benchmark_spec(spec: BenchmarkSpec, path) -> None:
    doc = {
        "size": spec.size,
        "train_per_domain": spec.train_per_domain,
        "test_per_domain": spec.test_per_domain,
        "geometry": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in vars(spec.geometry).items()},
        "domains": [{k: list(v) if isinstance(v, tuple) else v
                     for k, v in vars(d).items()} for d in spec.domains],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float64 in [0, 1]
    mask_od: np.ndarray     # (H, W) uint8 {0, 1}
    mask_oc: np.ndarray     # (H, W) uint8 {0, 1}
    domain: str
    id: str


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def _ellipse_field(size, cy, cx, a, b, phi):
    """Normalized elliptical distance: < 1 inside, 1 on the boundary."""
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dy, dx = ys - cy, xs - cx
    u = (dy * np.cos(phi) + dx * np.sin(phi)) / a
    v = (-dy * np.sin(phi) + dx * np.cos(phi)) / b
    return np.sqrt(u * u + v * v)


def _soft_edge(dist, softness_px, scale_px):
    return np.clip((1.0 - dist) * scale_px / softness_px + 0.5, 0.0, 1.0)


def _draw_geometry(geom: GeometrySpec, size: int, rng: np.random.Generator):
    s = float(size)
    cy, cx = s / 2 + rng.uniform(-1, 1, 2) * geom.center_jitter * s
    a = rng.uniform(*geom.disc_radius) * s
    b = a * rng.uniform(*geom.eccentricity)
    phi = rng.uniform(0.0, np.pi)
    ratio = rng.uniform(*geom.cup_ratio)
    max_off = (1.0 - ratio) * min(a, b) * 0.4
    oy, ox = rng.uniform(-1, 1, 2) * max_off
    grad_dir = rng.uniform(0.0, 2 * np.pi)
    grad_amp = rng.uniform(0.04, 0.10)
    n_blobs = int(rng.integers(geom.n_distractors[0], geom.n_distractors[1] + 1))
    blobs = [(rng.uniform(0, s), rng.uniform(0, s),
              rng.uniform(*geom.distractor_amp), rng.uniform(s / 32, s / 10))
             for _ in range(n_blobs)]
    return dict(cy=cy, cx=cx, a=a, b=b, phi=phi, ratio=ratio, oy=oy, ox=ox,
                grad_dir=grad_dir, grad_amp=grad_amp, blobs=blobs)


def _render_structure(geom: GeometrySpec, size: int, g: dict):
    """Grayscale structural image plus the two masks (style-free)."""
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    base = 0.32 + g["grad_amp"] * (
        (np.cos(g["grad_dir"]) * (ys / size - 0.5) + np.sin(g["grad_dir"]) * (xs / size - 0.5)) * 2)
    for by, bx, amp, sig in g["blobs"]:
        base += amp * np.exp(-0.5 * (((ys - by) ** 2 + (xs - bx) ** 2) / sig**2))
    d_disc = _ellipse_field(size, g["cy"], g["cx"], g["a"], g["b"], g["phi"])
    d_cup = _ellipse_field(size, g["cy"] + g["oy"], g["cx"] + g["ox"],
                           g["a"] * g["ratio"], g["b"] * g["ratio"], g["phi"])
    base += 0.30 * _soft_edge(d_disc, geom.edge_softness, min(g["a"], g["b"]))
    base += 0.16 * _soft_edge(d_cup, geom.edge_softness, min(g["a"], g["b"]) * g["ratio"])
    mask_od = (d_disc <= 1.0).astype(np.uint8)
    mask_oc = (d_cup <= 1.0).astype(np.uint8)
    mask_oc &= mask_od  # cup strictly inside disc, guaranteed
    return np.clip(base, 0.02, 0.98), mask_od, mask_oc


def _apply_style(base: np.ndarray, spec: DomainSpec, rng: np.random.Generator):
    from .styleaug import gaussian_blur  # local import avoids a cycle

    size = base.shape[0]
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    tex = spec.texture_amp * np.sin(
        2 * np.pi * spec.texture_freq * (np.cos(theta) * xs + np.sin(theta) * ys) / size + phase)
    cast = np.asarray(spec.color_cast) * rng.uniform(0.97, 1.03, size=3)
    img = np.clip(base[None] * cast[:, None, None] + tex[None], 0.0, 1.0)
    img = np.power(img, spec.gamma * rng.uniform(0.95, 1.05))
    if spec.blur_sigma > 0:
        img = gaussian_blur(img, spec.blur_sigma)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_domain(spec: DomainSpec, n: int, seed: int, geometry: GeometrySpec | None = None,
                 size: int = 64, start_index: int = 0, id_prefix: str = "") -> list[Sample]:
    """Generate n samples of one domain.

    Geometry streams depend only on (seed, sample index), so different
    domains built from the same seed share masks bitwise; style streams add
    the domain name to the entropy.
    """
    if n < 1:
        raise ConfigError("sample count must be >= 1")
    spec.validate()
    geometry = geometry or GeometrySpec()
    dom_hash = stable_name_hash(spec.name)
    out = []
    for i in range(n):
        idx = start_index + i
        geo_rng = derive_rng(seed, TAG_GEOMETRY, idx)
        sty_rng = derive_rng(seed, TAG_DOMAIN_STYLE, dom_hash, idx)
        g = _draw_geometry(geometry, size, geo_rng)
        base, mask_od, mask_oc = _render_structure(geometry, size, g)
        image = _apply_style(base, spec, sty_rng)
        out.append(Sample(image, mask_od, mask_oc, spec.name, f"{id_prefix}{idx:04d}"))
    return out


def synth_benchmark(spec: BenchmarkSpec, seed: int) -> dict[str, dict[str, list[Sample]]]:
    """All domains, split into train/test with disjoint geometry indices."""
    spec.validate()
    out = {}
    for dom in spec.domains:
        train = synth_domain(dom, spec.train_per_domain, seed, spec.geometry,
                             spec.size, start_index=0, id_prefix="train_")
        test = synth_domain(dom, spec.test_per_domain, seed, spec.geometry,
                            spec.size, start_index=spec.train_per_domain, id_prefix="test_")
        out[dom.name] = {"train": train, "test": test}
    return out


# ---------------------------------------------------------------------------
# netpbm codecs
# ---------------------------------------------------------------------------

def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)  # round half up


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a (3, H, W) float image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3, H, W), got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("write_ppm values must lie in [0, 1]")
    h, w = image.shape[1:]
    payload = _quantize(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a {0, 1} mask, encoded as 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"write_pgm expects (H, W), got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("write_pgm mask must be {0, 1}-valued")
    h, w = mask.shape
    payload = (mask.astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def write_pgm_gray(path, gray: np.ndarray) -> None:
    """Binary PGM from raw uint8 grayscale values (feature-map export)."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"write_pgm_gray expects (H, W), got shape {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def _parse_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DataError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise DataError(f"{path}: malformed header byte {ch!r}")
    if pos >= len(data) or data[pos : pos + 1] not in b" \t\r\n":
        raise DataError(f"{path}: missing whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, data[pos:]


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float image in [0, 1] from a binary PPM."""
    w, h, payload = _parse_netpbm(path, b"P6")
    if len(payload) != 3 * w * h:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {3 * w * h}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8 {0, 1} mask from a binary PGM (threshold at 128)."""
    w, h, payload = _parse_netpbm(path, b"P5")
    if len(payload) != w * h:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (arr >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def save_samples(root, samples: list[Sample]) -> None:
    root = Path(root)
    for s in samples:
        dom_dir = root / s.domain
        dom_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(dom_dir / f"{s.id}.ppm", s.image)
        write_pgm(dom_dir / f"{s.id}_od.pgm", s.mask_od)
        write_pgm(dom_dir / f"{s.id}_oc.pgm", s.mask_oc)


class Dataset:
    """Domain-grouped samples with a stable (lexicographic) order."""

    def __init__(self, groups: dict[str, list[Sample]]):
        self.groups = groups

    @property
    def domains(self) -> list[str]:
        return list(self.groups)

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups.values())

    def all_samples(self) -> list[Sample]:
        return [s for g in self.groups.values() for s in g]


def load_dataset(root) -> Dataset:
    """Index ``root/<domain>/<id>.ppm`` (+ ``_od`` / ``_oc`` masks) on disk."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DataError(f"no domains found under {root}")
    groups: dict[str, list[Sample]] = {}
    for dom in domains:
        samples = []
        for ppm in sorted((root / dom).glob("*.ppm")):
            sid = ppm.stem
            od_path = ppm.with_name(f"{sid}_od.pgm")
            oc_path = ppm.with_name(f"{sid}_oc.pgm")
            if not od_path.exists() or not oc_path.exists():
                raise DataError(f"missing mask for image {ppm}")
            samples.append(Sample(read_ppm(ppm), read_pgm(od_path), read_pgm(oc_path),
                                  dom, sid))
        if not samples:
            raise DataError(f"domain directory {root / dom} contains no images")
        groups[dom] = samples
    return Dataset(groups)
