"""Local sensing: restricted depth scans, synthetic binaural audio, and magnitude spectrograms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .scene import CATEGORIES, CategorySet, Scene

HEADINGS = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    t: int = 0

    @classmethod
    def from_cell(cls, x: int, y: int, heading_index: int, t: int = 0) -> "Pose":
        return cls(float(x), float(y), heading_index * math.pi / 2, t)

    @property
    def heading_index(self) -> int:
        return int(round(self.heading / (math.pi / 2))) % 4

    @property
    def cell(self) -> tuple[int, int]:
        return int(round(self.x)), int(round(self.y))


@dataclass(frozen=True)
class DepthConfig:
    height: int = 16
    width: int = 16
    fov_deg: float = 10.0
    max_depth: float = 5.0


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    window: int = 16000
    n_fft: int = 512
    hop: int = 256
    window_kind: str = "hann"
    ear_separation: float = 0.2
    speed_of_sound: float = 343.0
    ild: float = 0.8
    noise_level: float = 0.01
    loop_windows: int = 4

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frames(self) -> int:
        return (self.window - self.n_fft) // self.hop + 1

    @classmethod
    def desk(cls) -> "AudioConfig":
        """Small spectrograms (2 x 33 x 31) for CPU-scale training."""
        return cls(sample_rate=8000, window=2048, n_fft=64, hop=64)


@dataclass
class DepthImage:
    values: np.ndarray
    fov: float
    max_depth: float


@dataclass
class BinauralWaveform:
    samples: np.ndarray  # (2, L): left, right
    sample_rate: int


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (2, K, F)
    n_fft: int
    hop: int
    window_kind: str


@dataclass
class Observation:
    pose: Pose
    goal: np.ndarray
    depth: DepthImage | None = None
    audio: BinauralWaveform | None = None
    spectrogram: Spectrogram | None = None


# -- depth ------------------------------------------------------------------
def _first_blocked(scene: Scene, ox: float, oy: float, dx: float, dy: float, reach: float):
    """Amanatides-Woo traversal; returns the first blocked (or out-of-bounds) cell or None."""
    cx, cy = int(round(ox)), int(round(oy))
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    t_max_x = ((cx + 0.5 * step_x) - ox) / dx if abs(dx) > 1e-12 else math.inf
    t_max_y = ((cy + 0.5 * step_y) - oy) / dy if abs(dy) > 1e-12 else math.inf
    t_dx = abs(1.0 / dx) if abs(dx) > 1e-12 else math.inf
    t_dy = abs(1.0 / dy) if abs(dy) > 1e-12 else math.inf
    grid = scene.grid
    h, w = grid.shape
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            cx += step_x
            t_max_x += t_dx
        else:
            t = t_max_y
            cy += step_y
            t_max_y += t_dy
        if t > reach:
            return None
        if not (0 <= cx < w and 0 <= cy < h) or not grid[cy, cx]:
            return cx, cy


def render_depth(scene: Scene, pose: Pose, config: DepthConfig = DepthConfig()) -> DepthImage:
    """Planar depth to the first blocked cell for each ray of the horizontal fan.

    A pixel reports the distance from the agent to the centre of the first
    blocked cell its ray enters, measured along the viewing axis and clipped
    to ``max_depth``. Rows replicate the single horizontal scan.
    """
    fov = math.radians(config.fov_deg)
    hx, hy = math.cos(pose.heading), math.sin(pose.heading)
    scan = np.full(config.width, config.max_depth)
    for j in range(config.width):
        # column 0 looks furthest to the left (counter-clockwise)
        a = pose.heading + fov * (0.5 - (j + 0.5) / config.width)
        hit = _first_blocked(scene, pose.x, pose.y, math.cos(a), math.sin(a), config.max_depth + 1.0)
        if hit is not None:
            depth = (hit[0] - pose.x) * hx + (hit[1] - pose.y) * hy
            scan[j] = min(max(depth, 0.0), config.max_depth)
    values = np.repeat(scan[None, :], config.height, axis=0)
    return DepthImage(values, config.fov_deg, config.max_depth)


# -- audio --------------------------------------------------------------------
def synthesize_source(category: str, duration: float, seed: int, sample_rate: int = 16000,
                      categories: CategorySet = CATEGORIES, noise_level: float = 0.01) -> np.ndarray:
    """Deterministic mono signature: harmonic partials under a periodic attack/decay envelope plus seeded noise."""
    if category not in categories.signatures:
        raise KeyError(f"unknown sound category {category!r}")
    sig = categories.signatures[category]
    n = int(round(duration * sample_rate))
    if n <= 0:
        return np.zeros(0)
    rng = np.random.default_rng([seed, categories.index(category)])
    t = np.arange(n) / sample_rate
    tone = np.zeros(n)
    nyquist = sample_rate / 2
    for k, amp in enumerate(sig.partials):
        f = sig.base_hz * (k + 1)
        if f < nyquist:
            tone += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    attack = 0.005
    since = (t * sig.events_per_s + rng.uniform()) % 1.0 / sig.events_per_s
    env = np.minimum(since / attack, 1.0) * np.exp(-np.maximum(since - attack, 0.0) / sig.decay_s)
    wave = tone * (0.2 + 0.8 * env) + noise_level * rng.standard_normal(n)
    peak = np.abs(wave).max()
    return wave / peak if peak > 0 else wave


@dataclass(frozen=True)
class SoundSource:
    category: str
    cell: tuple[int, int]
    loop: np.ndarray = field(repr=False, compare=False)


def source_gain(distance: float, absorption: float) -> float:
    if not np.isfinite(distance):
        return 0.0
    return (1.0 / (1.0 + distance)) * (1.0 - absorption) ** distance


def bearing(pose: Pose, cell) -> float:
    """Source direction in the agent frame, radians in (-pi, pi]; positive = to the left."""
    dx, dy = cell[0] - pose.x, cell[1] - pose.y
    if dx == 0 and dy == 0:
        return 0.0
    phi = math.atan2(dy, dx) - pose.heading
    return math.atan2(math.sin(phi), math.cos(phi))


def spatialize(segment: np.ndarray, gain: float, phi: float, config: AudioConfig) -> np.ndarray:
    """Apply level (ILD) and integer-sample time (ITD) differences to a mono segment."""
    s = math.sin(phi)
    left = gain * (1.0 + config.ild * s) / 2.0
    right = gain * (1.0 - config.ild * s) / 2.0
    delay = int(round(config.ear_separation * abs(s) / config.speed_of_sound * config.sample_rate))
    near = segment
    far = np.roll(segment, delay) if delay else segment
    if s >= 0:
        return np.stack([left * near, right * far])
    return np.stack([left * far, right * near])


def render_binaural(scene: Scene, pose: Pose, sources: list[SoundSource], config: AudioConfig,
                    step: int = 0) -> BinauralWaveform:
    """Mix all active sources with geodesic attenuation and per-ear cues."""
    out = np.zeros((2, config.window))
    for src in sources:
        d = scene.geodesic(pose.cell, src.cell)
        g = source_gain(d, scene.absorption)
        if g == 0.0:
            continue
        k = step % config.loop_windows
        seg = src.loop[k * config.window:(k + 1) * config.window]
        out += spatialize(seg, g, bearing(pose, src.cell), config)
    return BinauralWaveform(out, config.sample_rate)


def make_source(category: str, cell, seed: int, config: AudioConfig) -> SoundSource:
    dur = config.window * config.loop_windows / config.sample_rate
    loop = synthesize_source(category, dur, seed, config.sample_rate, noise_level=config.noise_level)
    return SoundSource(category, tuple(cell), loop)


# -- spectrogram --------------------------------------------------------------
def stft_spectrogram(waveform, n_fft: int = 512, hop: int = 256, window_kind: str = "hann") -> Spectrogram:
    """One-sided STFT magnitudes |sum_l x(l) w(l - tau*hop) e^{-j 2 pi w l / n_fft}| per channel.

    Returns shape (channels, n_fft // 2 + 1, floor((L - n_fft) / hop) + 1).
    """
    x = waveform.samples if isinstance(waveform, BinauralWaveform) else np.asarray(waveform, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    length = x.shape[-1]
    if length < n_fft:
        raise ValueError(f"waveform length {length} shorter than n_fft {n_fft}")
    win = get_window(window_kind, n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft, axis=-1)[:, ::hop]
    mags = np.abs(np.fft.rfft(frames * win, axis=-1))
    return Spectrogram(mags.transpose(0, 2, 1), n_fft, hop, window_kind)


def goal_vector(categories_remaining, categories: CategorySet = CATEGORIES) -> np.ndarray:
    return categories.multi_hot(categories_remaining)
