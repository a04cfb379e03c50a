"""Procedural street-like scenes with exact depth and semantic ground truth.

A scene is a ground plane, a sky, and fronto-parallel rectangles (buildings,
vehicles, poles, signs) standing on or above the ground. Rendering casts one
ray per pixel center through a pinhole camera and keeps the nearest hit, so
labels and depth are occlusion-consistent by construction. Appearance is the
only thing a DomainStyle changes; geometry, labels and depth never depend on it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

GROUND, SKY, BUILDING, VEHICLE, POLE, SIGN = range(6)
CLASS_NAMES = ("ground", "sky", "building", "vehicle", "pole", "sign")
NUM_CLASSES = len(CLASS_NAMES)
KIND_BY_NAME = {name.upper(): i for i, name in enumerate(CLASS_NAMES)}

D_MIN = 1.0
D_MAX = 100.0
REF_SIZE = 64  # camera intrinsics are stored for a 64x64 image and rescaled at render time

BASE_ALBEDO = np.array([
    [0.40, 0.40, 0.42],  # ground
    [0.50, 0.70, 0.95],  # sky
    [0.62, 0.48, 0.36],  # building
    [0.15, 0.25, 0.70],  # vehicle
    [0.55, 0.55, 0.50],  # pole
    [0.95, 0.75, 0.10],  # sign
])
FOG_COLOR = np.array([0.75, 0.78, 0.82])
FOG_DISTANCE = 70.0
# proxy depth: disparity = DISP_SCALE / depth, rounded to DISP_STEP
DISP_SCALE = 1000.0
DISP_STEP = 0.125


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: int
    position: tuple[float, float, float]  # (lateral x, bottom height y, depth z) of the front face
    size: tuple[float, float]  # (width, height)
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Camera:
    height: float
    focal: float  # pixels at REF_SIZE
    cx: float
    cy: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...]
    camera: Camera


@dataclass(frozen=True)
class GrammarConfig:
    """Primitive-count ranges (inclusive) and placement bounds in world units."""

    buildings: tuple[int, int] = (0, 4)
    vehicles: tuple[int, int] = (0, 4)
    poles: tuple[int, int] = (0, 3)
    signs: tuple[int, int] = (0, 3)
    building_depth: tuple[float, float] = (12.0, 60.0)
    vehicle_depth: tuple[float, float] = (3.0, 25.0)
    pole_depth: tuple[float, float] = (3.0, 18.0)
    camera_height: tuple[float, float] = (1.3, 1.7)

    def validate(self) -> None:
        for name in ("buildings", "vehicles", "poles", "signs"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad count range for {name}: {(lo, hi)}")
        for name in ("building_depth", "vehicle_depth", "pole_depth", "camera_height"):
            lo, hi = getattr(self, name)
            if not (lo <= hi) or lo <= 0:
                raise ConfigError(f"bad range for {name}: {(lo, hi)}")
        for name in ("building_depth", "vehicle_depth", "pole_depth"):
            lo, hi = getattr(self, name)
            if lo < D_MIN or hi > D_MAX:
                raise ConfigError(f"{name} must lie in [{D_MIN}, {D_MAX}]")
        if self.camera_height[0] < 1.0:
            raise ConfigError("camera height below 1 puts the nearest ground closer than d_min")


@dataclass(frozen=True)
class DomainStyle:
    domain: str
    palette_shift: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0),) * NUM_CLASSES
    texture_amplitude: float = 0.05
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.01


STYLE_A = DomainStyle("A")
# B repaints every class so that colors learned on A point to the wrong class
STYLE_B = DomainStyle(
    "B",
    palette_shift=(
        (0.15, 0.05, -0.20),   # ground -> brown
        (0.30, 0.12, -0.15),   # sky -> overcast
        (-0.20, -0.06, 0.14),  # building -> blue-grey, close to A's ground
        (0.55, -0.10, -0.50),  # vehicle -> red
        (-0.30, -0.30, -0.25), # pole -> dark
        (-0.70, -0.30, 0.50),  # sign -> blue
    ),
    texture_amplitude=0.20,
    tint=(1.05, 0.95, 0.85),
    noise_sigma=0.04,
)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    depth: np.ndarray  # 1 x H x W world units
    labels: np.ndarray  # 1 x H x W int64
    valid_mask: np.ndarray  # 1 x H x W in {0, 1}
    domain: str
    seed: int = 0


# ---------------------------------------------------------------- scenes
def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _lateral(rng: np.random.Generator, z: float, focal: float, width: float) -> float:
    # keep the rectangle's center inside the view so it is never fully off-screen
    half_view = 0.9 * z * (REF_SIZE / 2) / focal
    return float(rng.uniform(-half_view, half_view)) - width / 2


def _albedo(rng: np.random.Generator, kind: int, jitter: float) -> tuple[float, float, float]:
    a = np.clip(BASE_ALBEDO[kind] + rng.uniform(-jitter, jitter, size=3), 0.0, 1.0)
    return tuple(float(v) for v in a)


def generate_scene(seed: int, config: GrammarConfig | None = None) -> SceneSpec:
    """Sample a scene deterministically from ``seed``."""
    config = config or GrammarConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    focal = REF_SIZE / 2
    camera = Camera(height=_uniform(rng, config.camera_height), focal=focal,
                    cx=REF_SIZE / 2, cy=REF_SIZE / 2)
    prims: list[Primitive] = []

    for _ in range(int(rng.integers(config.buildings[0], config.buildings[1] + 1))):
        z = _uniform(rng, config.building_depth)
        w = float(rng.uniform(6.0, 25.0))
        h = float(rng.uniform(5.0, 25.0))
        prims.append(Primitive(BUILDING, (_lateral(rng, z, focal, w), 0.0, z), (w, h), _albedo(rng, BUILDING, 0.08)))

    for _ in range(int(rng.integers(config.vehicles[0], config.vehicles[1] + 1))):
        z = _uniform(rng, config.vehicle_depth)
        w = float(rng.uniform(1.7, 4.5))
        h = float(rng.uniform(1.3, 1.9))
        prims.append(Primitive(VEHICLE, (_lateral(rng, z, focal, w), 0.0, z), (w, h), _albedo(rng, VEHICLE, 0.2)))

    poles: list[Primitive] = []
    for _ in range(int(rng.integers(config.poles[0], config.poles[1] + 1))):
        z = _uniform(rng, config.pole_depth)
        w = float(rng.uniform(0.5, 0.9))
        h = float(rng.uniform(4.0, 7.0))
        p = Primitive(POLE, (_lateral(rng, z, focal, w), 0.0, z), (w, h), _albedo(rng, POLE, 0.05))
        poles.append(p)
    prims.extend(poles)

    for i in range(int(rng.integers(config.signs[0], config.signs[1] + 1))):
        s = float(rng.uniform(1.2, 2.0))
        if poles:
            host = poles[i % len(poles)]
            x = host.position[0] + host.size[0] / 2 - s / 2
            y = host.position[1] + host.size[1] - s
            z = max(D_MIN, host.position[2] - 0.05)
        else:
            z = _uniform(rng, config.pole_depth)
            x = _lateral(rng, z, focal, s)
            y = float(rng.uniform(2.0, 3.5))
        prims.append(Primitive(SIGN, (x, y, z), (s, s), _albedo(rng, SIGN, 0.05)))

    return SceneSpec(seed=int(seed), primitives=tuple(prims), camera=camera)


# --------------------------------------------------------------- geometry
def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return u + 0.5, v + 0.5


def _intrinsics(camera: Camera, h: int, w: int) -> tuple[float, float, float]:
    scale = w / REF_SIZE
    return camera.focal * scale, camera.cx * scale, camera.cy * (h / REF_SIZE)


def rasterize(scene: SceneSpec, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-hit ray test per pixel. Returns (depth, labels, hit primitive index or -1)."""
    h, w = resolution
    f, cx, cy = _intrinsics(scene.camera, h, w)
    u, v = _pixel_grid(h, w)
    ch = scene.camera.height
    depth = np.full((h, w), D_MAX)
    labels = np.full((h, w), SKY, dtype=np.int64)
    index = np.full((h, w), -1, dtype=np.int64)

    below = v > cy
    zg = np.where(below, f * ch / np.maximum(v - cy, 1e-9), np.inf)
    ground = below & (zg < np.inf)
    depth[ground] = np.clip(zg[ground], D_MIN, D_MAX)
    labels[ground] = GROUND

    for i, p in enumerate(scene.primitives):
        x0, y0, z = p.position
        pw, ph = p.size
        # world x at depth z through pixel u, world height through pixel v
        xw = (u - cx) * z / f
        yw = ch - (v - cy) * z / f
        inside = (xw >= x0) & (xw < x0 + pw) & (yw >= y0) & (yw < y0 + ph)
        nearer = inside & (z < depth)
        depth[nearer] = z
        labels[nearer] = p.kind
        index[nearer] = i
    return depth, labels, index


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    return ndimage.zoom(coarse, (h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:h, :w]


def _style_key(style: DomainStyle) -> int:
    return int.from_bytes(style.domain.encode("utf-8")[:8].ljust(8, b"\0"), "little")


def render(scene: SceneSpec, style: DomainStyle, resolution: tuple[int, int] = (64, 64)) -> Sample:
    h, w = resolution
    if not (32 <= h <= 128 and 32 <= w <= 128):
        raise ConfigError(f"resolution must lie in 32..128, got {resolution}")
    depth, labels, index = rasterize(scene, resolution)
    f, cx, cy = _intrinsics(scene.camera, h, w)
    u, v = _pixel_grid(h, w)

    shift = np.asarray(style.palette_shift, dtype=np.float64)
    albedo = np.empty((h, w, 3))
    albedo[:] = BASE_ALBEDO[GROUND] + shift[GROUND]
    sky = labels == SKY
    # sky brightens toward the horizon
    t = np.clip(v / max(cy, 1.0), 0.0, 1.0)[..., None]
    sky_col = (BASE_ALBEDO[SKY] + shift[SKY]) * (0.8 + 0.2 * t)
    albedo[sky] = sky_col[sky]
    for i, p in enumerate(scene.primitives):
        m = index == i
        if m.any():
            albedo[m] = np.asarray(p.albedo) + shift[p.kind]

    shade = np.ones((h, w))
    # windows on building faces, lane stripes on the ground
    for i, p in enumerate(scene.primitives):
        if p.kind != BUILDING:
            continue
        m = index == i
        if not m.any():
            continue
        z = p.position[2]
        xw = (u - cx) * z / f - p.position[0]
        yw = scene.camera.height - (v - cy) * z / f
        win = (np.mod(xw, 3.0) < 1.5) & (np.mod(yw, 3.5) > 1.2) & (np.mod(yw, 3.5) < 2.6)
        shade[m & win] = 0.65
    gmask = labels == GROUND
    if gmask.any():
        xg = (u - cx) * depth / f
        stripe = (np.abs(xg) < 0.12) & (np.mod(depth, 6.0) < 3.0)
        shade[gmask & stripe] = 1.6

    rgb = np.clip(albedo, 0.0, 1.0) * shade[..., None]
    fog = 1.0 - np.exp(-depth / FOG_DISTANCE)
    fog[sky] = 0.0
    rgb = rgb * (1.0 - fog[..., None]) + FOG_COLOR * fog[..., None]

    rng = np.random.default_rng([scene.seed, _style_key(style)])
    if style.texture_amplitude:
        tex = 0.6 * _smooth_noise(rng, h, w, 8) + 0.4 * _smooth_noise(rng, h, w, 24)
        rgb = rgb * (1.0 + style.texture_amplitude * tex[..., None])
    rgb = rgb * np.asarray(style.tint)
    if style.noise_sigma:
        rgb = rgb + rng.normal(0.0, style.noise_sigma, size=rgb.shape)
    image = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).copy()

    return Sample(
        image=image,
        depth=depth[None].copy(),
        labels=labels[None].copy(),
        valid_mask=np.ones((1, h, w)),
        domain=style.domain,
        seed=scene.seed,
    )


def make_proxy_depth(sample: Sample, noise_sigma: float = 0.05, hole_fraction: float = 0.1,
                     seed: int = 0) -> Sample:
    """Emulate confidence-filtered stereo depth: multiplicative noise, disparity
    quantization and clustered invalid blobs. ``noise_sigma == 0`` skips quantization
    too, so a clean proxy equals the ground truth."""
    if not 0.0 <= hole_fraction < 0.5:
        raise ConfigError(f"hole_fraction must lie in [0, 0.5), got {hole_fraction}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng([seed, sample.seed])
    depth = sample.depth.copy()
    _, h, w = depth.shape
    if noise_sigma > 0:
        depth = depth * rng.normal(1.0, noise_sigma, size=depth.shape)
        depth = np.clip(depth, D_MIN, D_MAX)
        disp = np.round(DISP_SCALE / depth / DISP_STEP) * DISP_STEP
        depth = np.clip(DISP_SCALE / disp, D_MIN, D_MAX)
    mask = sample.valid_mask.copy()
    n_holes = int(round(hole_fraction * h * w))
    if n_holes:
        field_ = _smooth_noise(rng, h, w, 6) + 0.05 * rng.uniform(-1, 1, size=(h, w))
        order = np.argsort(field_.ravel(), kind="stable")[:n_holes]
        flat = mask.reshape(-1)
        flat[order] = 0.0
    return Sample(image=sample.image, depth=depth, labels=sample.labels, valid_mask=mask,
                  domain=sample.domain, seed=sample.seed)


# --------------------------------------------------------------- datasets
@dataclass
class Split:
    """Stacked samples of one split of one domain."""

    images: np.ndarray  # N x 3 x H x W
    depth: np.ndarray  # N x 1 x H x W
    labels: np.ndarray  # N x 1 x H x W
    valid: np.ndarray  # N x 1 x H x W
    seeds: list[int]
    domain: str

    def __len__(self) -> int:
        return len(self.seeds)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], domain: str) -> "Split":
        return cls(
            images=np.stack([s.image for s in samples]),
            depth=np.stack([s.depth for s in samples]),
            labels=np.stack([s.labels for s in samples]),
            valid=np.stack([s.valid_mask for s in samples]),
            seeds=[s.seed for s in samples],
            domain=domain,
        )

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], self.depth[i], self.labels[i], self.valid[i], self.domain, self.seeds[i])

    def with_proxy_depth(self, noise_sigma: float, hole_fraction: float, seed: int) -> "Split":
        proxies = [make_proxy_depth(self.sample(i), noise_sigma, hole_fraction, seed) for i in range(len(self))]
        return Split(self.images, np.stack([p.depth for p in proxies]), self.labels,
                     np.stack([p.valid_mask for p in proxies]), list(self.seeds), self.domain)


@dataclass
class DomainData:
    train: Split
    val: Split
    test: Split


@dataclass
class PairedDatasets:
    A: DomainData
    B: DomainData
    manifest: dict = field(default_factory=dict)


def _scene_seeds(seed: int, count: int) -> list[int]:
    rng = np.random.default_rng(seed)
    out: list[int] = []
    seen: set[int] = set()
    while len(out) < count:
        for s in rng.integers(0, 2**62, size=count - len(out)).tolist():
            if s not in seen:
                seen.add(s)
                out.append(int(s))
    return out


def build_dataset(n_train: int, n_val: int, n_test: int, style_a: DomainStyle = STYLE_A,
                  style_b: DomainStyle = STYLE_B, seed: int = 0, paired: bool = False,
                  resolution: tuple[int, int] = (64, 64), grammar: GrammarConfig | None = None) -> PairedDatasets:
    """Render disjoint train/val/test splits for both domains.

    Scene seeds are unique across every split and domain unless ``paired`` is set,
    in which case B re-renders A's scenes under its own style.
    """
    grammar = grammar or GrammarConfig()
    grammar.validate()
    counts = (n_train, n_val, n_test)
    if min(counts) < 0:
        raise ConfigError("split sizes must be non-negative")
    per_domain = sum(counts)
    pool = _scene_seeds(seed, per_domain if paired else 2 * per_domain)
    seeds_a = pool[:per_domain]
    seeds_b = seeds_a if paired else pool[per_domain:]

    def make(style: DomainStyle, seeds: list[int]) -> DomainData:
        bounds = np.cumsum((0,) + counts)
        splits = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            samples = [render(generate_scene(s, grammar), style, resolution) for s in seeds[lo:hi]]
            if samples:
                splits.append(Split.from_samples(samples, style.domain))
            else:
                h, w = resolution
                empty = np.zeros((0, 1, h, w))
                splits.append(Split(np.zeros((0, 3, h, w)), empty, empty.astype(np.int64), empty, [], style.domain))
        return DomainData(*splits)

    manifest = {
        "seed": int(seed),
        "paired": bool(paired),
        "resolution": list(resolution),
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "grammar": asdict(grammar),
        "styles": {"A": asdict(style_a), "B": asdict(style_b)},
        "scene_seeds": {
            "A": _split_seeds(seeds_a, counts),
            "B": _split_seeds(seeds_b, counts),
        },
    }
    return PairedDatasets(make(style_a, seeds_a), make(style_b, seeds_b), manifest)


def _split_seeds(seeds: list[int], counts: tuple[int, int, int]) -> dict[str, list[int]]:
    a, b, _ = counts
    return {"train": seeds[:a], "val": seeds[a : a + b], "test": seeds[a + b :]}


# ------------------------------------------------------------ file output
def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8 bit. ``image`` is 3 x H x W in [0, 1]."""
    _, h, w = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path: str | Path, values: np.ndarray, maxval: int) -> None:
    """Binary P5. 16-bit samples are big-endian as the format requires."""
    arr = np.asarray(values).reshape(values.shape[-2:])
    h, w = arr.shape
    if maxval > 255:
        payload = np.clip(np.round(arr), 0, maxval).astype(">u2").tobytes()
    else:
        payload = np.clip(np.round(arr), 0, maxval).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a P5/P6 file written by this module; returns H x W or H x W x 3 integers."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    magic, dims, maxval, payload = parts
    w, h = (int(t) for t in dims.split())
    maxval = int(maxval)
    dtype = ">u2" if maxval > 255 else np.uint8
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels) if channels == 3 else \
        np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr.astype(np.int64)


DEPTH_PGM_SCALE = 655.35


def write_sample(sample: Sample, directory: str | Path, stem: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{stem}_image.ppm", sample.image)
    write_pgm(d / f"{stem}_depth.pgm", sample.depth * DEPTH_PGM_SCALE, 65535)
    write_pgm(d / f"{stem}_labels.pgm", sample.labels, 255)


def write_dataset(data: PairedDatasets, out: str | Path) -> Path:
    """Write every sample as PPM/PGM files plus ``manifest.json``."""
    out = Path(out)
    for dom_name, dom in (("A", data.A), ("B", data.B)):
        for split_name in ("train", "val", "test"):
            split: Split = getattr(dom, split_name)
            for i in range(len(split)):
                write_sample(split.sample(i), out / dom_name / split_name, f"{i:05d}")
    path = out / "manifest.json"
    path.write_text(json.dumps(data.manifest, indent=2, sort_keys=True) + "\n")
    return path
