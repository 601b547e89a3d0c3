"""Synthetic lamppost fleet: node profiles, labelled image generation and
per-node train/test splits.

Each node renders its own fixed scene (background tint, texture, lamp
position, optional static light fixture) from its ``generator_seed``. The
label is always the schedule state; difficulty lives in the image only:

* Type0 (ideal): a bright lamp disc with halo appears when ON.
* Type1 (pole only): a soft low-contrast pool of light on the ground.
* Type2 (edge case): vegetation covers most of the frame; when ON a weak,
  attenuated glow leaks around it and the foliage shows up as a dark
  silhouette. Heavy per-sample noise and random glare.
"""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import ImageBuffer

MINUTES_PER_DAY = 1440
NIGHT_MARGIN = 15


class NodeType(enum.IntEnum):
    TYPE0 = 0
    TYPE1 = 1
    TYPE2 = 2


class LampState(enum.IntEnum):
    OFF = 0
    ON = 1


class FleetError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorParams:
    """Rendering knobs shared by a fleet."""

    frame_h: int = 48
    frame_w: int = 64
    contrast: float = 120.0           # Type0 lamp disc brightness above background
    type1_shift: float = 50.0         # Type1 ground-pool amplitude
    attenuation: float = 0.08         # Type2 glow = contrast * attenuation
    noise: float = 6.0                # per-pixel sensor noise (std)
    type2_noise_gain: float = 2.5
    distractor_prob: float = 0.15     # chance a node has a static always-lit fixture
    glare_prob: float = 0.25          # Type2 per-sample glare probability
    lamp_center: tuple[float, float] = (0.35, 0.5)   # lamp (row, col) as fractions of the crop
    lamp_jitter: float = 0.12          # per-node uniform offset around lamp_center
    texture: float = 3.0              # amplitude of the static background field
    housing: float = 10.0             # unlit lamp head brightness above background
    sign_center: tuple[float, float] | None = None   # sign lit while the lamp is off, (row, col)


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    node_type: NodeType
    samples_per_node: int = 200
    sunrise_minute: int = 360
    sunset_minute: int = 1080
    generator_seed: int = 0
    gen: GeneratorParams = field(default_factory=GeneratorParams)

    def __post_init__(self):
        if self.node_id < 0:
            raise FleetError(f"node_id must be non-negative, got {self.node_id}")
        object.__setattr__(self, "node_type", NodeType(self.node_type))
        if not (0 <= self.sunrise_minute < self.sunset_minute < MINUTES_PER_DAY):
            raise FleetError(
                f"node {self.node_id}: need 0 <= sunrise < sunset < 1440, "
                f"got {self.sunrise_minute}, {self.sunset_minute}")
        if self.samples_per_node < 2:
            raise FleetError(f"node {self.node_id}: samples_per_node must be >= 2")


@dataclass
class Sample:
    node_id: int
    timestamp_minute: int
    label: LampState
    image: ImageBuffer | None = None
    features: np.ndarray | None = None


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def derive_seed(*key: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])


# -- node-type CSV -----------------------------------------------------------

def load_node_types_csv(path, samples_per_node: int = 200, seed: int = 0,
                        gen: GeneratorParams | None = None) -> list[NodeProfile]:
    """Read a ``node_id,node_type`` CSV into profiles (order preserved).

    Schedule fields get their defaults; ``generator_seed`` is derived from
    ``seed`` and the node id.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"node-type CSV not found: {path}")
    gen = gen or GeneratorParams()
    profiles, seen = [], set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["node_id", "node_type"]:
            raise FleetError(f"{path}: header must be 'node_id,node_type'")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise FleetError(f"{path}: row {row_no}: expected 2 columns, got {len(row)}")
            try:
                node_id, node_type = int(row[0]), int(row[1])
            except ValueError:
                raise FleetError(f"{path}: row {row_no}: malformed row {row!r}") from None
            if node_id < 0:
                raise FleetError(f"{path}: row {row_no}: negative node_id {node_id}")
            if node_type not in (0, 1, 2):
                raise FleetError(f"{path}: row {row_no}: node_type {node_type} not in {{0,1,2}}")
            if node_id in seen:
                raise FleetError(f"{path}: row {row_no}: duplicate node_id {node_id}")
            seen.add(node_id)
            profiles.append(NodeProfile(node_id, NodeType(node_type), samples_per_node,
                                        generator_seed=derive_seed(seed, node_id), gen=gen))
    return profiles


def write_node_types_csv(profiles: list[NodeProfile], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("node_id,node_type\n")
        for p in profiles:
            fh.write(f"{p.node_id},{int(p.node_type)}\n")


def default_fleet(seed: int = 0, n_type0: int = 80, n_type1: int = 53, n_type2: int = 7,
                  samples_per_node: int = 200, sunrise_range=(300, 480),
                  sunset_range=(960, 1260), gen: GeneratorParams | None = None) -> list[NodeProfile]:
    """Desk-scale fleet: 133 normal (types 0/1) + 7 edge-case (type 2) nodes by default.

    Types are scattered over node ids by a seeded permutation; schedules are
    drawn per node from the given half-open minute ranges.
    """
    gen = gen or GeneratorParams()
    types = [NodeType.TYPE0] * n_type0 + [NodeType.TYPE1] * n_type1 + [NodeType.TYPE2] * n_type2
    if not types:
        raise FleetError("fleet must have at least one node")
    rng = np.random.default_rng(derive_seed(seed, 0xF1EE7))
    order = rng.permutation(len(types))
    profiles = []
    for node_id, idx in enumerate(order):
        sunrise = int(rng.integers(*sunrise_range))
        sunset = int(rng.integers(*sunset_range))
        profiles.append(NodeProfile(node_id, types[idx], samples_per_node, sunrise, sunset,
                                    derive_seed(seed, node_id), gen))
    return profiles


POPULATION_SPOTS = ((0.35, 0.3), (0.35, 0.7))


def two_population_fleet(seed: int = 0, per_population: int = 10, samples_per_node: int = 200
                         ) -> tuple[list[NodeProfile], dict[int, int]]:
    """Type0 fleet split into two camera layouts that a single model cannot serve.

    Population 0 has its lamp at spot A and a daytime-lit sign at spot B;
    population 1 has them the other way round. A light at A therefore means
    ON for one population and OFF for the other, and likewise for B. Winter
    schedules (nights of about 16 h) make ON the pooled majority for both
    patterns, so a shared model leans towards ON and misses both populations'
    daytime samples instead of settling on one population's rule. Returns the profiles and
    a node_id -> population map; populations interleave over node ids and
    each even/odd pair shares its schedule.
    """
    if per_population < 1:
        raise FleetError("per_population must be >= 1")
    spot_a, spot_b = POPULATION_SPOTS
    common = dict(lamp_jitter=0.0, distractor_prob=0.0, housing=0.0)
    gens = (GeneratorParams(lamp_center=spot_a, sign_center=spot_b, **common),
            GeneratorParams(lamp_center=spot_b, sign_center=spot_a, **common))
    rng = np.random.default_rng(derive_seed(seed, 0x2909))
    profiles, population = [], {}
    for node_id in range(2 * per_population):
        pop = node_id % 2
        if pop == 0:
            # neighbours share a schedule so both populations see the same label balance
            sunrise, sunset = int(rng.integers(450, 510)), int(rng.integers(960, 1020))
        profiles.append(NodeProfile(node_id, NodeType.TYPE0, samples_per_node, sunrise, sunset,
                                    derive_seed(seed, node_id), gens[pop]))
        population[node_id] = pop
    return profiles, population


# -- labels ------------------------------------------------------------------

def expected_state(timestamp_minute: int, profile: NodeProfile) -> LampState:
    """ON inside the closed window [sunset - 15, sunrise + 15] wrapping midnight."""
    if not 0 <= timestamp_minute < MINUTES_PER_DAY:
        raise ValueError(f"timestamp {timestamp_minute} outside [0, 1440)")
    night = (timestamp_minute >= profile.sunset_minute - NIGHT_MARGIN
             or timestamp_minute <= profile.sunrise_minute + NIGHT_MARGIN)
    return LampState.ON if night else LampState.OFF


# -- rendering ---------------------------------------------------------------

@dataclass(frozen=True)
class _Scene:
    background: np.ndarray       # (H, W, 3) noiseless base
    lamp_rc: tuple[float, float]
    lamp_radius: float
    glow_rc: tuple[float, float]
    foliage: np.ndarray | None   # (H, W) coverage in [0, 1]
    sign_rc: tuple[float, float] | None = None


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Low-frequency random field in roughly [-1, 1] via bilinear upsampling."""
    from ._resize_py import resize_bilinear

    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, 1))
    return resize_bilinear(coarse, h, w)[:, :, 0]


def _disc(h: int, w: int, rc: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    return ((rr - rc[0]) ** 2 + (cc - rc[1]) ** 2) <= radius ** 2


def _gauss(h: int, w: int, rc: tuple[float, float], sigma: float) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    return np.exp(-((rr - rc[0]) ** 2 + (cc - rc[1]) ** 2) / (2.0 * sigma ** 2))


_scene_cache: dict[tuple, _Scene] = {}


def _scene(profile: NodeProfile) -> _Scene:
    key = (profile.generator_seed, int(profile.node_type), profile.gen)
    hit = _scene_cache.get(key)
    if hit is not None:
        return hit
    g = profile.gen
    h, w = g.frame_h, g.frame_w
    rng = np.random.default_rng(derive_seed(profile.generator_seed, 1))
    tint = rng.uniform(20.0, 50.0, size=3)
    bg = np.broadcast_to(tint, (h, w, 3)).copy()
    bg += g.texture * _smooth_field(rng, h, w, 4)[:, :, None]
    side = min(h, w)
    top, left = (h - side) / 2.0, (w - side) / 2.0
    jr, jc = rng.uniform(-g.lamp_jitter, g.lamp_jitter, size=2)
    lamp = (top + (g.lamp_center[0] + jr) * side, left + (g.lamp_center[1] + jc) * side)
    radius = side * rng.uniform(0.06, 0.10)
    # Type1 sees the pole, not the head: light pools on the ground below
    glow = (top + rng.uniform(0.65, 0.85) * side, left + rng.uniform(0.35, 0.65) * side)
    fixture = None
    if rng.uniform() < g.distractor_prob:
        fixture = (top + rng.uniform(0.1, 0.9) * side, left + rng.uniform(0.1, 0.9) * side)
    if fixture is not None:
        bg += 0.8 * g.contrast * _disc(h, w, fixture, radius)[:, :, None] * np.array([1.0, 0.95, 0.85])
    foliage = None
    if profile.node_type == NodeType.TYPE2:
        cover = _smooth_field(rng, h, w, 6) + 0.9 * _gauss(h, w, lamp, side * 0.25)
        foliage = np.clip((cover + 0.1) * 3.0, 0.0, 1.0)
        leaf = np.array([0.35, 0.75, 0.3]) * 45.0
        bg = bg * (1.0 - foliage[:, :, None]) + leaf * foliage[:, :, None]
    sign = None
    if g.sign_center is not None:
        sign = (top + g.sign_center[0] * side, left + g.sign_center[1] * side)
    scene = _Scene(bg, lamp, radius, glow, foliage, sign)
    _scene_cache[key] = scene
    return scene


def _lit(img, rc, radius, g: GeneratorParams, warm, rng) -> np.ndarray:
    h, w = img.shape[:2]
    halo = 0.3 * g.contrast * _gauss(h, w, rc, 2.0 * radius)
    img = img + halo[:, :, None] * warm
    lit = img + g.contrast + np.abs(rng.normal(0.0, g.noise, size=img.shape))
    return np.where(_disc(h, w, rc, radius)[:, :, None], lit, img)


def render_image(profile: NodeProfile, state: LampState, rng: np.random.Generator) -> np.ndarray:
    g = profile.gen
    h, w = g.frame_h, g.frame_w
    sc = _scene(profile)
    img = sc.background * rng.uniform(0.85, 1.15)
    warm = np.array([1.0, 0.85, 0.6])
    on = state == LampState.ON
    noise = g.noise
    if profile.node_type == NodeType.TYPE0:
        if on:
            img = _lit(img, sc.lamp_rc, sc.lamp_radius, g, warm, rng)
        else:
            img = img + g.housing * _disc(h, w, sc.lamp_rc, sc.lamp_radius)[:, :, None]
        if sc.sign_rc is not None and not on:
            img = _lit(img, sc.sign_rc, sc.lamp_radius, g, warm, rng)
    elif profile.node_type == NodeType.TYPE1:
        if on:
            amp = g.type1_shift * rng.uniform(0.6, 1.2)
            pool = amp * _gauss(h, w, sc.glow_rc, 0.18 * min(h, w))
            img = img + (pool + 0.2 * amp)[:, :, None] * warm
    else:
        noise = g.noise * g.type2_noise_gain
        if on:
            amp = g.contrast * g.attenuation * rng.uniform(0.5, 1.3)
            leak = amp * (1.0 - 0.85 * sc.foliage)
            # reflected light picks up the foliage colour
            img = img + leak[:, :, None] * np.array([0.9, 1.0, 0.6])
        if rng.uniform() < g.glare_prob:
            rc = (rng.uniform(0, h), rng.uniform(0, w))
            img = img + (0.6 * g.contrast * _gauss(h, w, rc, rng.uniform(3.0, 8.0)))[:, :, None]
        specks = rng.uniform(size=(h, w)) < 0.05
        img = img + (specks * rng.uniform(-40.0, 40.0, size=(h, w)))[:, :, None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 255.0)


def generate_sample(profile: NodeProfile, timestamp_minute: int, draw_index: int) -> Sample:
    """Deterministic in (generator_seed, timestamp, draw_index)."""
    state = expected_state(timestamp_minute, profile)
    rng = np.random.default_rng(
        np.random.SeedSequence([profile.generator_seed, timestamp_minute, draw_index]))
    return Sample(profile.node_id, timestamp_minute, state,
                  image=ImageBuffer(render_image(profile, state, rng)))


def node_timestamps(profile: NodeProfile) -> list[int]:
    """Hourly timestamps cycling over the day from a node-specific minute offset."""
    offset = derive_seed(profile.generator_seed, 2) % 60
    return [(offset + 60 * i) % MINUTES_PER_DAY for i in range(profile.samples_per_node)]


def generate_node(profile: NodeProfile, featurize: Callable[[ImageBuffer], np.ndarray] | None = None
                  ) -> list[Sample]:
    out = []
    for i, t in enumerate(node_timestamps(profile)):
        s = generate_sample(profile, t, i)
        if featurize is not None:
            s = replace(s, image=None, features=featurize(s.image))
        out.append(s)
    if featurize is not None and out:
        # one contiguous block per node; samples keep row views into it
        block = np.stack([s.features for s in out])
        for s, row in zip(out, block):
            s.features = row
    return out


def generate_dataset(profiles: list[NodeProfile],
                     featurize: Callable[[ImageBuffer], np.ndarray] | None = None,
                     threads: int = 1) -> dict[int, list[Sample]]:
    """Generate every node's samples. With ``featurize`` the raw images are
    replaced by feature vectors as they are produced."""
    if not profiles:
        raise FleetError("profile list is empty")
    ids = [p.node_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise FleetError("duplicate node_id in profile list")
    for p in profiles:
        _scene(p)  # populate the cache before any worker threads start
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(lambda p: generate_node(p, featurize), profiles))
    else:
        chunks = [generate_node(p, featurize) for p in profiles]
    return {p.node_id: c for p, c in zip(profiles, chunks)}


# -- splits ------------------------------------------------------------------

def split_test_count(n: int, fraction: float) -> int:
    """round(fraction * n) clamped to [1, n - 1]; halves round up."""
    exact = Fraction(repr(fraction)) * n
    k = int(exact + Fraction(1, 2))
    return min(max(k, 1), n - 1)


def split_train_test(samples: list[Sample], cfg: SplitConfig) -> tuple[list[Sample], list[Sample]]:
    """Per-node seeded split; both halves keep the input order."""
    by_node: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_node.setdefault(s.node_id, []).append(i)
    test_idx: set[int] = set()
    for node_id, idx in sorted(by_node.items()):
        if len(idx) < 2:
            raise FleetError(f"node {node_id} has {len(idx)} sample(s); need at least 2 to split")
        rng = np.random.default_rng(derive_seed(cfg.split_seed, node_id, 3))
        k = split_test_count(len(idx), cfg.test_fraction)
        chosen = rng.choice(len(idx), size=k, replace=False)
        test_idx.update(idx[j] for j in chosen)
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def split_dataset(dataset: dict[int, list[Sample]], cfg: SplitConfig
                  ) -> dict[int, tuple[list[Sample], list[Sample]]]:
    return {nid: split_train_test(samples, cfg) for nid, samples in dataset.items()}
