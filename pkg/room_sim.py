"""
Image-method room simulation and scene rendering.

Provides microphone-array geometries (with a registry of the eight built-in arrays),
shoebox room impulse responses, constrained random scene sampling, and rendering of
multichannel mixtures (target + optional interferer + directional and isotropic
noise) to in-memory examples or to a corpus directory with a JSONL manifest.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from signal_core import CANONICAL_RATE, MultiChannelWave, read_wav, write_wav
from source_store import SourceStore

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.1
SINC_TAPS = 8
EARLY_WINDOW_S = 0.05
MAX_SAMPLING_DRAWS = 10000
PEAK_LIMIT = 0.95

Position = Tuple[float, float, float]

CONSTRAINTS = ('none', 'similar_angle', 'similar_distance')
GEOMETRY_KINDS = ('circular', 'triangular', 'rectangular', 'linear')


@dataclass
class ArrayGeometry:
    """Microphone positions in meters relative to the array centroid, shape (M, 3)."""
    name: str
    mic_positions: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.mic_positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
            raise ValueError(f"Geometry '{self.name}' needs (M, 3) positions with M >= 1, got {positions.shape}")
        centroid = positions.mean(axis=0)
        if np.max(np.abs(centroid)) > 1e-9:
            raise ValueError(f"Geometry '{self.name}' centroid {centroid} is not at the origin")
        if len(positions) > 1:
            diffs = positions[:, None, :] - positions[None, :, :]
            dists = np.linalg.norm(diffs, axis=-1)
            dists[np.diag_indices(len(positions))] = np.inf
            if dists.min() <= 1e-3:
                raise ValueError(f"Geometry '{self.name}' has microphones closer than 1 mm")
        self.mic_positions = positions

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    def max_spacing(self) -> float:
        if self.n_mics < 2:
            return 0.0
        diffs = self.mic_positions[:, None, :] - self.mic_positions[None, :, :]
        return float(np.linalg.norm(diffs, axis=-1).max())

    def min_spacing(self) -> float:
        """Smallest distance between two microphones."""
        if self.n_mics < 2:
            return 0.0
        diffs = self.mic_positions[:, None, :] - self.mic_positions[None, :, :]
        dists = np.linalg.norm(diffs, axis=-1)
        dists[np.diag_indices(self.n_mics)] = np.inf
        return float(dists.min())

    def permuted(self, order: Sequence[int]) -> 'ArrayGeometry':
        return ArrayGeometry(f"{self.name}-perm", self.mic_positions[list(order)])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> 'ArrayGeometry':
        """Subset of microphones, re-centered on their own centroid."""
        positions = self.mic_positions[list(indices)]
        return ArrayGeometry(name or f"{self.name}-sub", positions - positions.mean(axis=0))

    def to_dict(self) -> dict:
        return {'name': self.name, 'mics_m': self.mic_positions.tolist()}

    @classmethod
    def from_dict(cls, data: dict, recenter: bool = False) -> 'ArrayGeometry':
        if 'name' not in data or 'mics_m' not in data:
            raise ValueError("Geometry document needs 'name' and 'mics_m'")
        positions = np.asarray(data['mics_m'], dtype=np.float64)
        if recenter and positions.ndim == 2 and len(positions):
            positions = positions - positions.mean(axis=0)
        return cls(str(data['name']), positions)


def _recentered(name: str, positions: np.ndarray) -> ArrayGeometry:
    positions = np.asarray(positions, dtype=np.float64)
    positions = positions - positions.mean(axis=0)
    positions[np.abs(positions) < 1e-15] = 0.0
    return ArrayGeometry(name, positions)


def make_geometry(kind: str, n_mics: int, size_param: float, center_mic: bool = False,
                  aspect: float = 1.0, name: Optional[str] = None) -> ArrayGeometry:
    """
    Build a planar array geometry (all mics at z = 0).

    Args:
        kind: 'circular', 'triangular', 'rectangular' or 'linear'.
        n_mics: Total number of microphones.
        size_param: Radius (circular, triangular circumscribed), side along x
            (rectangular), or total length (linear), in meters.
        center_mic: Circular only; the last microphone sits at the center and the
            remaining n_mics - 1 are on the circle.
        aspect: Rectangular only; width / height ratio.
        name: Geometry name (defaults to kind + count).

    Raises:
        ValueError: Unsupported (kind, n_mics) combination or non-positive size.
    """
    if n_mics < 1:
        raise ValueError(f"n_mics must be >= 1, got {n_mics}")
    if size_param <= 0:
        raise ValueError(f"size_param must be positive, got {size_param}")
    name = name or f"{kind}{n_mics}"

    if kind == 'circular':
        n_ring = n_mics - 1 if center_mic else n_mics
        if n_ring < 2 or (center_mic and n_mics < 3):
            raise ValueError(f"circular array needs at least 2 mics on the ring, got n_mics={n_mics}")
        angles = 2.0 * np.pi * np.arange(n_ring) / n_ring
        ring = np.stack([size_param * np.cos(angles), size_param * np.sin(angles), np.zeros(n_ring)], axis=1)
        positions = np.vstack([ring, np.zeros((1, 3))]) if center_mic else ring
    elif kind == 'triangular':
        if n_mics not in (3, 4):
            raise ValueError(f"triangular array supports 3 or 4 mics, got {n_mics}")
        angles = 2.0 * np.pi * np.arange(3) / 3
        positions = np.stack([size_param * np.cos(angles), size_param * np.sin(angles), np.zeros(3)], axis=1)
        if n_mics == 4:
            positions = np.vstack([positions, np.zeros((1, 3))])
    elif kind == 'rectangular':
        if n_mics != 4:
            raise ValueError(f"rectangular array supports 4 mics, got {n_mics}")
        if aspect <= 0:
            raise ValueError(f"aspect must be positive, got {aspect}")
        half_w, half_h = size_param / 2.0, size_param / aspect / 2.0
        positions = np.array([
            [half_w, half_h, 0.0],
            [-half_w, half_h, 0.0],
            [-half_w, -half_h, 0.0],
            [half_w, -half_h, 0.0],
        ])
    elif kind == 'linear':
        if n_mics < 2:
            raise ValueError(f"linear array needs at least 2 mics, got {n_mics}")
        xs = np.linspace(-size_param / 2.0, size_param / 2.0, n_mics)
        positions = np.stack([xs, np.zeros(n_mics), np.zeros(n_mics)], axis=1)
    else:
        raise ValueError(f"Unknown geometry kind '{kind}'. Available: {', '.join(GEOMETRY_KINDS)}")
    return _recentered(name, positions)


CIRC7_RADIUS = 0.0425

BUILTIN_GEOMETRIES = {
    # seen during training
    'circ7': lambda: make_geometry('circular', 7, CIRC7_RADIUS, center_mic=True, name='circ7'),
    'tri4': lambda: make_geometry('triangular', 4, CIRC7_RADIUS, name='tri4'),
    'rect4': lambda: make_geometry('rectangular', 4, CIRC7_RADIUS, aspect=1.0 / math.sqrt(3.0), name='rect4'),
    'circ6': lambda: make_geometry('circular', 6, CIRC7_RADIUS, name='circ6'),
    # unseen
    'tri3': lambda: make_geometry('triangular', 3, CIRC7_RADIUS, name='tri3'),
    'circ5': lambda: make_geometry('circular', 5, 0.03, name='circ5'),
    'lin3': lambda: make_geometry('linear', 3, 0.06, name='lin3'),
    'circ8': lambda: make_geometry('circular', 8, 0.10, name='circ8'),
}

TRAIN_GEOMETRIES = ['circ7', 'tri4', 'rect4', 'circ6']
UNSEEN_GEOMETRIES = ['tri3', 'circ5', 'lin3', 'circ8']


def load_geometry_file(path: Path) -> ArrayGeometry:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Geometry file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"Geometry file {path} is not valid JSON: {exc}") from exc
    return ArrayGeometry.from_dict(data)


def save_geometry_file(geometry: ArrayGeometry, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(geometry.to_dict(), f, indent=2)


def resolve_geometry(name_or_path: str) -> ArrayGeometry:
    """Built-in geometry by name, or a geometry JSON file by path."""
    if name_or_path in BUILTIN_GEOMETRIES:
        return BUILTIN_GEOMETRIES[name_or_path]()
    path = Path(name_or_path)
    if path.suffix.lower() == '.json' or path.exists():
        return load_geometry_file(path)
    raise ValueError(
        f"Unknown geometry '{name_or_path}'. Built-in: {', '.join(BUILTIN_GEOMETRIES)} "
        "(or pass a path to a geometry JSON file)"
    )


def aliasing_frequency(spacing_m: float, speed_of_sound: float = SPEED_OF_SOUND) -> float:
    """Highest frequency whose wrapped phase difference is unambiguous for a mic pair."""
    if spacing_m <= 0:
        return math.inf
    return speed_of_sound / (2.0 * spacing_m)


def aliasing_distance(sample_rate: int = CANONICAL_RATE, speed_of_sound: float = SPEED_OF_SOUND) -> float:
    """Spacing above which a pair aliases below the Nyquist frequency."""
    return 2.0 * speed_of_sound / sample_rate


@dataclass
class RoomSpec:
    """Shoebox room; max_image_order=None keeps every image within the RIR length."""
    dimensions: Position
    t60: float
    speed_of_sound: float = SPEED_OF_SOUND
    max_image_order: Optional[int] = 6
    absorption_model: str = 'eyring'
    rir_length_factor: float = 1.2

    def __post_init__(self):
        self.dimensions = tuple(float(d) for d in self.dimensions)
        if len(self.dimensions) != 3:
            raise ValueError(f"Room dimensions must be 3D, got {self.dimensions}")
        if not all(2.0 <= d <= 15.0 for d in self.dimensions):
            raise ValueError(f"Room dimensions must each lie in [2, 15] m, got {self.dimensions}")
        if not 0.05 <= self.t60 <= 2.0:
            raise ValueError(f"T60 must lie in [0.05, 2.0] s, got {self.t60}")
        if self.max_image_order is not None and self.max_image_order < 0:
            raise ValueError(f"max_image_order must be >= 0, got {self.max_image_order}")
        if self.absorption_model not in ('sabine', 'eyring'):
            raise ValueError(f"absorption_model must be 'sabine' or 'eyring', got {self.absorption_model}")
        if self.rir_length_factor < 1.0:
            raise ValueError(f"rir_length_factor must be >= 1, got {self.rir_length_factor}")

    def absorption(self) -> Tuple[float, bool]:
        return t60_to_absorption(self.dimensions, self.t60, method=self.absorption_model)

    def rir_length(self, fs: int = CANONICAL_RATE) -> int:
        return int(math.ceil(self.rir_length_factor * self.t60 * fs))

    def contains(self, pos: Sequence[float], margin: float = 0.0) -> bool:
        return all(margin <= p <= d - margin for p, d in zip(pos, self.dimensions))

    def to_dict(self) -> dict:
        data = asdict(self)
        data['dimensions'] = list(self.dimensions)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'RoomSpec':
        return cls(**data)


def t60_to_absorption(room_dims: Sequence[float], t60: float, method: str = 'sabine') -> Tuple[float, bool]:
    """
    Uniform wall absorption coefficient for a target reverberation time.

    Args:
        room_dims: (Lx, Ly, Lz) in meters.
        t60: Reverberation time in seconds.
        method: 'sabine' (alpha = 0.161 V / (S T60)) or 'eyring'
            (alpha = 1 - exp(-0.161 V / (S T60))).

    Returns:
        Tuple of (alpha, clamped) where clamped is True when the requested T60 is
        not achievable and alpha was limited to 0.99.
    """
    if t60 <= 0:
        raise ValueError(f"T60 must be positive, got {t60}")
    lx, ly, lz = (float(d) for d in room_dims)
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    ratio = 0.161 * volume / (surface * t60)
    if method == 'sabine':
        alpha = ratio
    elif method == 'eyring':
        alpha = 1.0 - math.exp(-ratio)
    else:
        raise ValueError(f"Unknown absorption method '{method}'")
    clamped = alpha > 0.99
    alpha = min(alpha, 0.99)
    alpha = max(alpha, np.finfo(np.float64).tiny)
    return alpha, clamped


def _axis_images(src: float, length: float, n_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image coordinates along one axis and the wall reflections each needs."""
    r = np.arange(-n_max, n_max + 1)
    coords = np.concatenate([src + 2.0 * r * length, -src + 2.0 * r * length])
    reflections = np.concatenate([np.abs(r) + np.abs(r), np.abs(r - 1) + np.abs(r)])
    return coords, reflections


def _fractional_taps(delays: np.ndarray, gains: np.ndarray, n: int) -> np.ndarray:
    """Accumulate windowed-sinc fractional-delay impulses into a length-n response."""
    half = SINC_TAPS // 2
    base = np.floor(delays).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    t = idx - delays[:, None]
    kernel = np.sinc(t) * 0.5 * (1.0 + np.cos(np.pi * t / half))
    kernel[np.abs(t) >= half] = 0.0
    weights = gains[:, None] * kernel
    valid = (idx >= 0) & (idx < n)
    return np.bincount(idx[valid], weights=weights[valid], minlength=n)[:n]


def image_method_rir(room: RoomSpec, src: Sequence[float], mic: Sequence[float],
                     fs: int = CANONICAL_RATE, length: Optional[int] = None) -> np.ndarray:
    """
    Shoebox room impulse response from src to mic by the image-source method.

    Every image contributes beta^reflections / (4 pi d) at delay d / c, placed with an
    8-tap Hann-windowed sinc. The response is at least T60 * fs samples long.
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if not room.contains(src) or not room.contains(mic):
        raise ValueError(f"Source {src.tolist()} and microphone {mic.tolist()} must lie inside the room")
    if np.linalg.norm(src - mic) < 0.01:
        raise ValueError("source coincident with microphone (closer than 1 cm)")

    alpha, clamped = room.absorption()
    if clamped:
        logging.warning(f"T60 {room.t60} s is not achievable in room {room.dimensions}; absorption clamped to 0.99")
    beta = math.sqrt(1.0 - alpha)
    c = room.speed_of_sound
    n = length or room.rir_length(fs)
    max_delay = n + SINC_TAPS

    if room.max_image_order is None:
        reach = max_delay / fs * c
        orders = [int(math.ceil(reach / (2.0 * d))) + 1 for d in room.dimensions]
    else:
        orders = [room.max_image_order] * 3

    x_img, x_ref = _axis_images(src[0], room.dimensions[0], orders[0])
    y_img, y_ref = _axis_images(src[1], room.dimensions[1], orders[1])
    z_img, z_ref = _axis_images(src[2], room.dimensions[2], orders[2])
    dy2 = (y_img - mic[1])[:, None] ** 2 + (z_img - mic[2])[None, :] ** 2
    yz_ref = y_ref[:, None] + z_ref[None, :]

    rir = np.zeros(n)
    # one x-slice at a time keeps memory bounded for the auto order
    for x, x_r in zip(x_img, x_ref):
        dist = np.sqrt((x - mic[0]) ** 2 + dy2)
        refl = x_r + yz_ref
        keep = dist / c * fs < max_delay
        if room.max_image_order is not None:
            keep &= refl <= room.max_image_order
        if not keep.any():
            continue
        d = dist[keep]
        gains = beta ** refl[keep] / (4.0 * math.pi * d)
        rir += _fractional_taps(d / c * fs, gains, n)
    return rir


def measure_t60(rir: np.ndarray, fs: int = CANONICAL_RATE) -> float:
    """Reverberation time from Schroeder backward integration (T20 fit, extrapolated to 60 dB)."""
    energy = np.asarray(rir, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("cannot measure T60 of an all-zero impulse response")
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    start = int(np.argmax(edc_db <= -5.0))
    stop = int(np.argmax(edc_db <= -25.0))
    if edc_db[-1] > -25.0 or stop <= start + 1:
        raise ValueError("impulse response too short to reach -25 dB decay")
    t = np.arange(start, stop) / fs
    slope, _ = np.polyfit(t, edc_db[start:stop], 1)
    return float(-60.0 / slope)


def isotropic_positions(room: RoomSpec, center: Sequence[float], count: int,
                        radius: Optional[float] = None) -> np.ndarray:
    """Fibonacci-sphere source positions around center, kept inside the room walls."""
    center = np.asarray(center, dtype=np.float64)
    dims = np.asarray(room.dimensions)
    limit = float(min((center - WALL_MARGIN).min(), (dims - center - WALL_MARGIN).min()))
    if limit <= 0:
        raise ValueError(f"Array center {center.tolist()} is too close to a wall for isotropic noise")
    radius = limit if radius is None else min(radius, limit)
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    ring = np.sqrt(1.0 - z ** 2)
    phi = np.pi * (3.0 - math.sqrt(5.0)) * i
    directions = np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=1)
    return center + radius * directions


def _as_position(value) -> Position:
    return tuple(float(v) for v in value)


@dataclass
class SceneSpec:
    """Full generative description of one simulated utterance."""
    room: RoomSpec
    geometry: ArrayGeometry
    array_center: Position
    target_pos: Position
    interferer_pos: Optional[Position]
    noise_positions: List[Position]
    sir_db: Optional[float]
    snr_db: Optional[float]
    source_ids: Dict[str, object]
    seed: int = 0
    isotropic_sources: int = 8
    duration_s: float = 4.0
    enrollment_s: float = 4.0
    condition: str = 'train'

    def __post_init__(self):
        self.array_center = _as_position(self.array_center)
        self.target_pos = _as_position(self.target_pos)
        if self.interferer_pos is not None:
            self.interferer_pos = _as_position(self.interferer_pos)
        self.noise_positions = [_as_position(p) for p in self.noise_positions]
        self.validate()

    def speaker_distance(self, pos: Position) -> float:
        return float(np.linalg.norm(np.subtract(pos, self.array_center)))

    def mic_positions(self) -> np.ndarray:
        return np.asarray(self.array_center) + self.geometry.mic_positions

    def validate(self) -> None:
        room = self.room
        positions = [self.target_pos] + list(self.noise_positions)
        if self.interferer_pos is not None:
            positions.append(self.interferer_pos)
        for pos in positions:
            if not room.contains(pos, WALL_MARGIN):
                raise ValueError(f"Position {pos} is not inside the room with {WALL_MARGIN} m wall margin")
        for mic in self.mic_positions():
            if not room.contains(mic, WALL_MARGIN):
                raise ValueError(f"Microphone at {mic.tolist()} is not inside the room")
        d_target = self.speaker_distance(self.target_pos)
        if not 0.5 - 1e-9 <= d_target <= 2.5 + 1e-9:
            raise ValueError(f"Target distance {d_target:.3f} m outside [0.5, 2.5] m")
        if self.interferer_pos is not None:
            d_interf = self.speaker_distance(self.interferer_pos)
            if not 0.5 - 1e-9 <= d_interf <= 2.5 + 1e-9:
                raise ValueError(f"Interferer distance {d_interf:.3f} m outside [0.5, 2.5] m")
            if d_target > d_interf:
                raise ValueError("Target must be closer to the array than the interferer")
        if self.duration_s <= 0 or self.enrollment_s <= 0:
            raise ValueError("duration_s and enrollment_s must be positive")

    def to_dict(self) -> dict:
        return {
            'room': self.room.to_dict(),
            'geometry': self.geometry.to_dict(),
            'array_center': list(self.array_center),
            'target_pos': list(self.target_pos),
            'interferer_pos': list(self.interferer_pos) if self.interferer_pos is not None else None,
            'noise_positions': [list(p) for p in self.noise_positions],
            'sir_db': self.sir_db,
            'snr_db': self.snr_db,
            'source_ids': self.source_ids,
            'seed': self.seed,
            'isotropic_sources': self.isotropic_sources,
            'duration_s': self.duration_s,
            'enrollment_s': self.enrollment_s,
            'condition': self.condition,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SceneSpec':
        data = dict(data)
        data['room'] = RoomSpec.from_dict(data['room'])
        data['geometry'] = ArrayGeometry.from_dict(data['geometry'])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class MixtureExample:
    """Rendered scene: mixture plus its stored components, all (M, N) float32."""
    mixture: MultiChannelWave
    target_ref: np.ndarray
    target_early: np.ndarray
    interferer: np.ndarray
    noise: np.ndarray
    enrollment: np.ndarray
    scene: Optional[SceneSpec] = None
    realized: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def metadata(self) -> dict:
        return {'scene': self.scene.to_dict() if self.scene else None, 'realized': dict(self.realized)}

    def components_sum(self) -> np.ndarray:
        return self.target_ref + self.interferer + self.noise

    def write(self, out_dir: Path, scene_id: str, root: Optional[Path] = None) -> dict:
        """Write component WAVs into out_dir and return the manifest entry."""
        out_dir = Path(out_dir)
        root = Path(root) if root else out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for key, samples in (('mixture', self.mixture.samples), ('target', self.target_ref),
                             ('target_early', self.target_early), ('interferer', self.interferer),
                             ('noise', self.noise), ('enrollment', self.enrollment)):
            path = out_dir / f"{key}.wav"
            write_wav(path, samples, self.mixture.sample_rate, subtype='FLOAT')
            paths[key] = str(path.relative_to(root))
        return {
            'id': scene_id,
            'geometry': self.scene.geometry.name if self.scene else None,
            'condition': self.scene.condition if self.scene else None,
            'paths': paths,
            'scene': self.scene.to_dict() if self.scene else None,
            'realized': dict(self.realized),
        }

    @classmethod
    def load(cls, entry: dict, root: Path) -> 'MixtureExample':
        root = Path(root)
        paths = entry['paths']
        mixture = read_wav(root / paths['mixture'])
        components = {key: read_wav(root / paths[key]).samples
                      for key in ('target', 'target_early', 'interferer', 'noise')}
        enrollment = read_wav(root / paths['enrollment']).samples[0]
        scene = SceneSpec.from_dict(entry['scene']) if entry.get('scene') else None
        return cls(mixture, components['target'], components['target_early'], components['interferer'],
                   components['noise'], enrollment, scene, dict(entry.get('realized', {})))


def _energy(x: np.ndarray) -> float:
    return float(np.sum(np.asarray(x, dtype=np.float64) ** 2))


def _level_db(signal: np.ndarray, other: np.ndarray) -> float:
    return 10.0 * math.log10(_energy(signal) / _energy(other))


def _scale_to_ratio(reference: np.ndarray, signal: np.ndarray, ratio_db: float) -> float:
    """Gain that puts signal ratio_db below reference (energies at the first mic)."""
    e_ref = _energy(reference[0])
    e_sig = _energy(signal[0])
    if e_ref <= 0 or e_sig <= 0:
        raise ValueError("cannot set SIR/SNR against silent signal")
    return math.sqrt(e_ref / (e_sig * 10.0 ** (ratio_db / 10.0)))


def _reverberate(room: RoomSpec, src: Sequence[float], mics: np.ndarray, dry: np.ndarray,
                 fs: int, early: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    n = len(dry)
    rirs = np.stack([image_method_rir(room, src, mic, fs) for mic in mics])
    wet = scipy.signal.fftconvolve(dry[None, :], rirs, axes=1)[:, :n]
    if not early:
        return wet, None
    early_rirs = rirs.copy()
    for m, mic in enumerate(mics):
        direct = np.linalg.norm(np.subtract(src, mic)) / room.speed_of_sound * fs
        cut = int(math.ceil(direct)) + SINC_TAPS // 2 + int(EARLY_WINDOW_S * fs)
        early_rirs[m, cut:] = 0.0
    early_wet = scipy.signal.fftconvolve(dry[None, :], early_rirs, axes=1)[:, :n]
    return wet, early_wet


def render_scene(spec: SceneSpec, sources: SourceStore, fs: int = CANONICAL_RATE) -> MixtureExample:
    """
    Render a scene to a mixture and its components.

    The interferer is scaled so the reverberant target/interferer energy ratio at
    the first microphone equals sir_db; the summed noise is scaled the same way for
    snr_db. A None level leaves that component at its natural level (interferer) or
    omits it (noise). Everything is scaled together if the mixture would clip.
    """
    n = int(round(spec.duration_s * fs))
    mics = spec.mic_positions()
    room = spec.room
    ids = spec.source_ids

    target_dry = sources.load(ids['target'], n)
    if _energy(target_dry) <= 0:
        raise ValueError("cannot set SIR/SNR against silent signal")
    target, target_early = _reverberate(room, spec.target_pos, mics, target_dry, fs, early=True)

    interferer = np.zeros_like(target)
    if spec.interferer_pos is not None:
        dry = sources.load(ids['interferer'], n)
        interferer, _ = _reverberate(room, spec.interferer_pos, mics, dry, fs)
        if spec.sir_db is not None:
            interferer *= _scale_to_ratio(target, interferer, spec.sir_db)

    noise = np.zeros_like(target)
    if spec.snr_db is not None:
        noise_ids = list(ids.get('noise', []))
        iso_ids = list(ids.get('isotropic', []))
        if len(noise_ids) != len(spec.noise_positions):
            raise ValueError(
                f"{len(spec.noise_positions)} directional noise positions but {len(noise_ids)} noise sources"
            )
        for pos, source_id in zip(spec.noise_positions, noise_ids):
            dry = sources.load(source_id, n)
            dry = dry / max(np.sqrt(np.mean(dry ** 2)), 1e-12)
            wet, _ = _reverberate(room, pos, mics, dry, fs)
            noise += wet
        if spec.isotropic_sources > 0 and iso_ids:
            iso_pos = isotropic_positions(room, spec.array_center, spec.isotropic_sources)
            weight = 1.0 / math.sqrt(spec.isotropic_sources)
            for k, pos in enumerate(iso_pos):
                dry = sources.load(iso_ids[k % len(iso_ids)], n)
                dry = np.roll(dry, k * n // max(spec.isotropic_sources, 1))
                dry = weight * dry / max(np.sqrt(np.mean(dry ** 2)), 1e-12)
                wet, _ = _reverberate(room, pos, mics, dry, fs)
                noise += wet
        noise *= _scale_to_ratio(target, noise, spec.snr_db)

    peak = float(np.max(np.abs(target + interferer + noise)))
    if peak > PEAK_LIMIT:
        gain = PEAK_LIMIT / peak
        target, target_early, interferer, noise = (x * gain for x in (target, target_early, interferer, noise))

    target32 = target.astype(np.float32)
    interferer32 = interferer.astype(np.float32)
    noise32 = noise.astype(np.float32)
    mixture = target32 + interferer32 + noise32

    enrollment = sources.load(ids['enrollment'], int(round(spec.enrollment_s * fs)))
    enrollment_peak = np.max(np.abs(enrollment))
    if enrollment_peak > PEAK_LIMIT:
        enrollment = enrollment * (PEAK_LIMIT / enrollment_peak)

    realized = {
        'sir_db': _level_db(target32[0], interferer32[0]) if _energy(interferer32[0]) > 0 else None,
        'snr_db': _level_db(target32[0], noise32[0]) if _energy(noise32[0]) > 0 else None,
    }
    logging.debug(f"Rendered scene seed={spec.seed}: SIR={realized['sir_db']} SNR={realized['snr_db']}")
    return MixtureExample(
        mixture=MultiChannelWave(mixture, fs),
        target_ref=target32,
        target_early=target_early.astype(np.float32),
        interferer=interferer32,
        noise=noise32,
        enrollment=enrollment.astype(np.float32),
        scene=spec,
        realized=realized,
    )


@dataclass
class DatasetConfig:
    """Ranges and probabilities for random scene sampling."""
    geometries: List[str] = field(default_factory=lambda: list(TRAIN_GEOMETRIES))
    t60_range: Tuple[float, float] = (0.15, 0.6)
    sir_range: Tuple[float, float] = (0.0, 10.0)
    snr_range: Tuple[float, float] = (0.0, 15.0)
    interferer_prob: float = 0.6
    constraint: str = 'none'
    condition: str = 'train'
    room_x_range: Tuple[float, float] = (6.0, 10.0)
    room_y_range: Tuple[float, float] = (6.0, 10.0)
    room_z_range: Tuple[float, float] = (2.7, 3.5)
    array_height: float = 1.2
    distance_range: Tuple[float, float] = (0.5, 2.5)
    directional_noise_range: Tuple[int, int] = (1, 2)
    isotropic_sources: int = 8
    duration_s: float = 4.0
    enrollment_s: float = 4.0
    max_image_order: Optional[int] = 6
    absorption_model: str = 'eyring'
    hours: float = 0.5
    n_scenes: Optional[int] = None

    def __post_init__(self):
        for key in ('t60_range', 'sir_range', 'snr_range', 'room_x_range', 'room_y_range',
                    'room_z_range', 'distance_range', 'directional_noise_range'):
            low, high = getattr(self, key)
            if low > high:
                raise ValueError(f"{key} must be (low, high) with low <= high, got {(low, high)}")
            setattr(self, key, (low, high))
        if not 0.0 <= self.interferer_prob <= 1.0:
            raise ValueError(f"interferer_prob must lie in [0, 1], got {self.interferer_prob}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"Unknown constraint '{self.constraint}'. Available: {', '.join(CONSTRAINTS)}")
        if not self.geometries:
            raise ValueError("DatasetConfig needs at least one geometry")
        self.geometries = list(self.geometries)

    def scene_count(self) -> int:
        if self.n_scenes is not None:
            return int(self.n_scenes)
        return max(1, int(math.ceil(self.hours * 3600.0 / self.duration_s)))

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'DatasetConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown dataset config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) and k != 'geometries' else v for k, v in data.items()})


DATASET_PRESETS = {
    'overfit8': DatasetConfig(n_scenes=8, condition='overfit', isotropic_sources=4, duration_s=2.0,
                              enrollment_s=2.0),
    'small2h': DatasetConfig(hours=2.0),
    'testA': DatasetConfig(interferer_prob=0.0, condition='A', hours=0.1),
    'testB': DatasetConfig(interferer_prob=1.0, condition='B', hours=0.1),
    'testB_angle': DatasetConfig(interferer_prob=1.0, constraint='similar_angle', condition='B_angle', hours=0.1),
    'testB_distance': DatasetConfig(interferer_prob=1.0, constraint='similar_distance', condition='B_distance',
                                    hours=0.1),
}


def dataset_preset(name: str, **overrides) -> DatasetConfig:
    if name not in DATASET_PRESETS:
        raise ValueError(f"Unknown dataset preset '{name}'. Available: {', '.join(DATASET_PRESETS)}")
    return replace(DATASET_PRESETS[name], **overrides)


def _angle_gap(a: float, b: float) -> float:
    gap = abs(a - b) % (2.0 * math.pi)
    return min(gap, 2.0 * math.pi - gap)


def _constraint_holds(constraint: str, d_t: float, az_t: float, d_i: float, az_i: float) -> bool:
    if constraint == 'similar_angle':
        return _angle_gap(az_t, az_i) < math.radians(5.0) and abs(d_t - d_i) > 1.0
    if constraint == 'similar_distance':
        return _angle_gap(az_t, az_i) > math.radians(45.0) and abs(d_t - d_i) < 0.1
    return True


def scene_satisfies(scene: SceneSpec, constraint: str) -> bool:
    """Check a sampled (or loaded) scene against a speaker-placement constraint."""
    if constraint == 'none':
        return True
    if scene.interferer_pos is None:
        return False
    center = np.asarray(scene.array_center)

    def polar(pos) -> Tuple[float, float]:
        offset = np.asarray(pos) - center
        return float(np.hypot(offset[0], offset[1])), math.atan2(offset[1], offset[0])

    d_t, az_t = polar(scene.target_pos)
    d_i, az_i = polar(scene.interferer_pos)
    return _constraint_holds(constraint, d_t, az_t, d_i, az_i)


def sample_scene(rng: np.random.Generator, dataset_cfg: DatasetConfig, constraint: Optional[str] = None,
                 sources: Optional[SourceStore] = None, geometry: Optional[str] = None) -> SceneSpec:
    """
    Draw a random scene.

    Speaker positions are drawn uniformly in distance and azimuth around the array and
    rejection-sampled until they fit the room and the constraint; the closer speaker is
    always the target. Deterministic given the generator state.

    Raises:
        ValueError: The constraint could not be satisfied in 10,000 draws.
    """
    cfg = dataset_cfg
    constraint = constraint or cfg.constraint
    if constraint not in CONSTRAINTS:
        raise ValueError(f"Unknown constraint '{constraint}'. Available: {', '.join(CONSTRAINTS)}")
    sources = sources or SourceStore()

    geometry_name = geometry or cfg.geometries[int(rng.integers(len(cfg.geometries)))]
    geom = resolve_geometry(geometry_name)
    dims = (float(rng.uniform(*cfg.room_x_range)), float(rng.uniform(*cfg.room_y_range)),
            float(rng.uniform(*cfg.room_z_range)))
    room = RoomSpec(dims, float(rng.uniform(*cfg.t60_range)), max_image_order=cfg.max_image_order,
                    absorption_model=cfg.absorption_model)
    center = np.array([dims[0] / 2.0, dims[1] / 2.0, cfg.array_height])

    speakers = sources.speakers()
    picks = rng.choice(len(speakers), size=2, replace=False)
    target_spk, interf_spk = speakers[int(picks[0])], speakers[int(picks[1])]
    target_utts = sources.utterances(target_spk)
    utt_pick = rng.choice(len(target_utts), size=min(2, len(target_utts)), replace=False)
    target_utt = target_utts[int(utt_pick[0])]
    enroll_utt = target_utts[int(utt_pick[-1])]
    interf_utts = sources.utterances(interf_spk)
    interf_utt = interf_utts[int(rng.integers(len(interf_utts)))]

    has_interferer = constraint != 'none' or rng.random() < cfg.interferer_prob

    def place(distance: float, azimuth: float) -> np.ndarray:
        return center + distance * np.array([math.cos(azimuth), math.sin(azimuth), 0.0])

    for _ in range(MAX_SAMPLING_DRAWS):
        d_t, az_t = rng.uniform(*cfg.distance_range), rng.uniform(0.0, 2.0 * math.pi)
        d_i, az_i = rng.uniform(*cfg.distance_range), rng.uniform(0.0, 2.0 * math.pi)
        if has_interferer and d_t > d_i:
            d_t, az_t, d_i, az_i = d_i, az_i, d_t, az_t
        target_pos = place(d_t, az_t)
        if not room.contains(target_pos, WALL_MARGIN):
            continue
        if not has_interferer:
            interferer_pos = None
            break
        interferer_pos = place(d_i, az_i)
        if room.contains(interferer_pos, WALL_MARGIN) and _constraint_holds(constraint, d_t, az_t, d_i, az_i):
            break
    else:
        raise ValueError(f"Could not satisfy constraint '{constraint}' within {MAX_SAMPLING_DRAWS} draws")

    noise_ids = sources.noises()
    n_directional = int(rng.integers(cfg.directional_noise_range[0], cfg.directional_noise_range[1] + 1))
    noise_positions = []
    while len(noise_positions) < n_directional:
        pos = place(rng.uniform(1.0, 3.0), rng.uniform(0.0, 2.0 * math.pi))
        pos[2] = rng.uniform(0.5, dims[2] - 0.5)
        if room.contains(pos, WALL_MARGIN):
            noise_positions.append(pos)
    directional_ids = [noise_ids[int(rng.integers(len(noise_ids)))] for _ in range(n_directional)]
    isotropic_ids = [noise_ids[int(rng.integers(len(noise_ids)))] for _ in range(cfg.isotropic_sources)]

    source_ids = {
        'target': target_utt,
        'enrollment': enroll_utt,
        'noise': directional_ids,
        'isotropic': isotropic_ids,
    }
    if has_interferer:
        source_ids['interferer'] = interf_utt

    return SceneSpec(
        room=room,
        geometry=geom,
        array_center=center,
        target_pos=target_pos,
        interferer_pos=interferer_pos,
        noise_positions=noise_positions,
        sir_db=float(rng.uniform(*cfg.sir_range)) if has_interferer else None,
        snr_db=float(rng.uniform(*cfg.snr_range)),
        source_ids=source_ids,
        seed=int(rng.integers(2 ** 31)),
        isotropic_sources=cfg.isotropic_sources,
        duration_s=cfg.duration_s,
        enrollment_s=cfg.enrollment_s,
        condition=cfg.condition,
    )


def worker_count(requested: Optional[int] = None) -> int:
    """Thread pool size, capped by the GEOPSE_THREADS environment variable."""
    cap = os.environ.get('GEOPSE_THREADS')
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(requested or limit, limit))


def simulate_corpus(out_dir: Path, cfg: DatasetConfig, seed: int = 0, sources: Optional[SourceStore] = None,
                    workers: Optional[int] = None, dry_run: bool = False) -> Dict[str, object]:
    """
    Sample and render a corpus into out_dir with a manifest.jsonl.

    Scenes are sampled sequentially from one seeded generator, then rendered in a
    thread pool; the manifest keeps sampling order.

    Returns:
        Statistics dictionary ('processed', 'failed', 'errors', 'manifest').
    """
    out_dir = Path(out_dir)
    sources = sources or SourceStore()
    rng = np.random.default_rng(seed)
    stats: Dict[str, object] = {'processed': 0, 'failed': 0, 'errors': [], 'manifest': out_dir / 'manifest.jsonl'}

    threshold = aliasing_distance()
    for name in cfg.geometries:
        spacing = resolve_geometry(name).min_spacing()
        if spacing > threshold:
            logging.warning(
                f"Geometry {name}: adjacent mic spacing {spacing * 100:.2f} cm exceeds the aliasing distance "
                f"{threshold * 100:.2f} cm; phase differences wrap below Nyquist"
            )

    count = cfg.scene_count()
    scenes = [sample_scene(rng, cfg, sources=sources) for _ in range(count)]
    logging.info(f"Sampled {count} scenes (condition={cfg.condition}, constraint={cfg.constraint})")
    if dry_run:
        for i, scene in enumerate(scenes):
            logging.info(f"[DRY RUN] scene_{i:05d}: {scene.geometry.name}, T60={scene.room.t60:.2f} s")
        stats['processed'] = count
        return stats

    out_dir.mkdir(parents=True, exist_ok=True)

    def render_one(item: Tuple[int, SceneSpec]) -> Optional[dict]:
        index, scene = item
        scene_id = f"scene_{index:05d}"
        try:
            example = render_scene(scene, sources)
            return example.write(out_dir / scene_id, scene_id, root=out_dir)
        except (ValueError, RuntimeError, OSError) as exc:
            logging.error(f"  Failed to render {scene_id}: {exc}")
            return {'id': scene_id, 'error': str(exc)}

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        entries = list(pool.map(render_one, enumerate(scenes)))

    with open(stats['manifest'], 'w', encoding='utf-8') as f:
        for i, entry in enumerate(entries, 1):
            if 'error' in entry:
                stats['failed'] += 1
                stats['errors'].append(f"{entry['id']}: {entry['error']}")
                continue
            f.write(json.dumps(entry, sort_keys=True) + '\n')
            stats['processed'] += 1
            if i % 50 == 0:
                logging.info(f"Progress: {i}/{count} scenes")
    return stats
