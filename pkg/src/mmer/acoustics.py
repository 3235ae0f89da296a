"""Room geometry sampling and image-source room impulse response simulation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
ROOM_HEIGHT = 2.9
SOURCE_HEIGHT = 1.75
MIC_HEIGHT = 1.6
WALL_MARGIN = 0.5
MIN_SOURCE_MIC_DISTANCE = 0.2
MIC_SPACING = 0.05
MAX_ATTEMPTS = 10_000

SINC_TAPS = 81
# Images arriving later than this after the direct path use a 1/128-sample delay grid.
EXACT_WINDOW_S = 0.05
DELAY_PHASES = 128
# Removes the DC build-up of the all-positive image train (Allen & Berkley).
HIGHPASS_HZ = 50.0


class InfeasibleGeometry(RuntimeError):
    pass


@dataclass
class RoomSpec:
    length_m: float
    width_m: float
    height_m: float
    t60_s: float
    source_pos: list[float]
    mic_positions: list[list[float]]
    seed: int = 0

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    @property
    def volume(self) -> float:
        return self.length_m * self.width_m * self.height_m

    @property
    def surface_area(self) -> float:
        l, w, h = self.length_m, self.width_m, self.height_m
        return 2.0 * (l * w + l * h + w * h)

    @property
    def mic_count(self) -> int:
        return len(self.mic_positions)

    def violations(self) -> list[str]:
        """List every broken geometry constraint (empty when the room is valid)."""
        problems = []
        l, w = self.length_m, self.width_m
        if not (3.0 <= l <= 8.0 and 3.0 <= w <= 8.0):
            problems.append(f"room footprint {l:.3f}x{w:.3f} outside [3, 8] m")
        if min(l, w) > 0 and not (1.0 <= max(l, w) / min(l, w) <= 1.6):
            problems.append(f"aspect ratio {max(l, w) / min(l, w):.3f} outside [1, 1.6]")
        if not (0.5 <= self.t60_s <= 0.85):
            problems.append(f"t60 {self.t60_s:.3f} s outside [0.5, 0.85]")
        if self.source_pos[2] != SOURCE_HEIGHT:
            problems.append(f"source height {self.source_pos[2]} != {SOURCE_HEIGHT}")
        d_c = critical_distance(self)
        src = np.asarray(self.source_pos)
        for name, pos in [("source", self.source_pos)] + [
            (f"mic {i}", p) for i, p in enumerate(self.mic_positions)
        ]:
            if not _inside_margin(pos, l, w):
                problems.append(f"{name} closer than {WALL_MARGIN} m to a wall")
        for i, pos in enumerate(self.mic_positions):
            if pos[2] != MIC_HEIGHT:
                problems.append(f"mic {i} height {pos[2]} != {MIC_HEIGHT}")
            dist = float(np.linalg.norm(np.asarray(pos) - src))
            if not (MIN_SOURCE_MIC_DISTANCE <= dist <= d_c):
                problems.append(
                    f"mic {i} distance {dist:.3f} m outside [{MIN_SOURCE_MIC_DISTANCE}, {d_c:.3f}]"
                )
        return problems

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(
            length_m=float(d["length_m"]),
            width_m=float(d["width_m"]),
            height_m=float(d["height_m"]),
            t60_s=float(d["t60_s"]),
            source_pos=[float(v) for v in d["source_pos"]],
            mic_positions=[[float(v) for v in p] for p in d["mic_positions"]],
            seed=int(d.get("seed", 0)),
        )


@dataclass
class RirSet:
    sample_rate_hz: int
    rirs: np.ndarray  # (C, n_samples)
    room: RoomSpec | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rirs = np.atleast_2d(np.asarray(self.rirs, dtype=np.float64))

    @property
    def channel_count(self) -> int:
        return self.rirs.shape[0]


def _inside_margin(pos, length: float, width: float) -> bool:
    x, y = pos[0], pos[1]
    return (
        WALL_MARGIN <= x <= length - WALL_MARGIN and WALL_MARGIN <= y <= width - WALL_MARGIN
    )


def critical_distance(room: RoomSpec) -> float:
    """Distance at which direct and reverberant energy are equal, in meters."""
    return 0.057 * math.sqrt(room.volume / room.t60_s)


def sabine_absorption(room: RoomSpec) -> float:
    """Uniform wall absorption coefficient that gives ``room.t60_s`` under Sabine's formula."""
    alpha = 0.161 * room.volume / (room.surface_area * room.t60_s)
    if alpha >= 1.0:
        logger.warning("room too dead for Sabine model (alpha=%.3f), clamping to 0.99", alpha)
    return min(alpha, 0.99)


def linear_array(center, n_mics: int, azimuth: float, spacing: float = MIC_SPACING) -> np.ndarray:
    """Positions of a horizontal uniform linear array centered on ``center``."""
    offsets = (np.arange(n_mics) - (n_mics - 1) / 2.0) * spacing
    direction = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    return np.asarray(center, dtype=np.float64)[None, :] + offsets[:, None] * direction[None, :]


def sample_room(rng_seed: int, mic_count: int = 3, max_attempts: int = MAX_ATTEMPTS) -> RoomSpec:
    """Draw a random shoebox room with a source and a compact linear mic array.

    Rejection sampling: every draw that breaks a geometry constraint is
    discarded, so the result satisfies ``RoomSpec.violations() == []``.
    """
    if mic_count < 1:
        raise ValueError(f"mic_count must be >= 1, got {mic_count}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_attempts):
        length, width = rng.uniform(3.0, 8.0, size=2)
        if max(length, width) / min(length, width) > 1.6:
            continue
        t60 = rng.uniform(0.5, 0.85)
        src = np.array(
            [
                rng.uniform(WALL_MARGIN, length - WALL_MARGIN),
                rng.uniform(WALL_MARGIN, width - WALL_MARGIN),
                SOURCE_HEIGHT,
            ]
        )
        volume = length * width * ROOM_HEIGHT
        d_c = 0.057 * math.sqrt(volume / t60)
        dz = SOURCE_HEIGHT - MIC_HEIGHT
        dist = rng.uniform(MIN_SOURCE_MIC_DISTANCE, d_c)
        horiz = math.sqrt(max(dist**2 - dz**2, 0.0))
        phi = rng.uniform(0.0, 2.0 * math.pi)
        center = src + np.array([horiz * math.cos(phi), horiz * math.sin(phi), -dz])
        center[2] = MIC_HEIGHT
        mics = linear_array(center, mic_count, rng.uniform(0.0, math.pi))
        mics[:, 2] = MIC_HEIGHT
        room = RoomSpec(
            length_m=float(length),
            width_m=float(width),
            height_m=ROOM_HEIGHT,
            t60_s=float(t60),
            source_pos=[float(v) for v in src],
            mic_positions=[[float(v) for v in m] for m in mics],
            seed=int(rng_seed),
        )
        if not room.violations():
            return room
    raise InfeasibleGeometry(f"infeasible geometry after {max_attempts} attempts (seed={rng_seed})")


def hann_sinc(offsets: np.ndarray, taps: int = SINC_TAPS) -> np.ndarray:
    """Hann-windowed sinc evaluated at sample offsets from the true arrival time."""
    half = (taps - 1) / 2.0
    window = np.where(np.abs(offsets) <= half, 0.5 * (1.0 + np.cos(np.pi * offsets / half)), 0.0)
    return window * np.sinc(offsets)


def _image_sources(room: RoomSpec, max_dist: float):
    """Image-source coordinates and reflection orders within ``max_dist`` of the room."""
    dims = room.dims
    src = np.asarray(room.source_pos, dtype=np.float64)
    per_axis = []
    for axis in range(3):
        n_max = int(math.ceil((max_dist + dims[axis]) / (2.0 * dims[axis]))) + 1
        n = np.arange(-n_max, n_max + 1)
        coords = np.concatenate([src[axis] + 2.0 * n * dims[axis], -src[axis] + 2.0 * n * dims[axis]])
        refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
        per_axis.append((coords - dims[axis] / 2.0, refl))
    (xs, kx), (ys, ky), (zs, kz) = per_axis
    # Images farther than this from the room center cannot reach any point inside in time.
    limit = max_dist + float(np.linalg.norm(dims)) / 2.0
    yz2 = ys[:, None] ** 2 + zs[None, :] ** 2
    kyz = ky[:, None] + kz[None, :]
    out_x, out_y, out_z, out_k = [], [], [], []
    for xi in range(len(xs)):
        keep = yz2 <= limit**2 - xs[xi] ** 2
        if not keep.any():
            continue
        iy, iz = np.nonzero(keep)
        out_x.append(np.full(iy.size, xs[xi]))
        out_y.append(ys[iy])
        out_z.append(zs[iz])
        out_k.append(kx[xi] + kyz[iy, iz])
    center = dims / 2.0
    return (
        np.concatenate(out_x) + center[0],
        np.concatenate(out_y) + center[1],
        np.concatenate(out_z) + center[2],
        np.concatenate(out_k),
    )


def _render(delays: np.ndarray, amps: np.ndarray, n_samples: int, split: float) -> np.ndarray:
    """Sum band-limited impulses at fractional ``delays`` (in samples)."""
    half = (SINC_TAPS - 1) // 2
    k = np.arange(-half, half + 1)
    out = np.zeros(n_samples + 2 * half + 2)
    early = delays <= split
    d, a = delays[early], amps[early]
    if d.size:
        base = np.floor(d).astype(np.int64)
        idx = base[:, None] + k[None, :]
        vals = a[:, None] * hann_sinc(idx - d[:, None])
        np.add.at(out, idx.ravel() + half, vals.ravel())
    d, a = delays[~early], amps[~early]
    if d.size:
        grid = np.rint(d * DELAY_PHASES).astype(np.int64)
        whole, phase = np.divmod(grid, DELAY_PHASES)
        width = n_samples + 1
        flat = phase * width + np.minimum(whole, n_samples)
        train = np.bincount(flat, weights=a, minlength=DELAY_PHASES * width)
        train = train.reshape(DELAY_PHASES, width)
        # kernels[p, j] = response at tap k[j] of an impulse delayed by p / DELAY_PHASES
        kernels = hann_sinc(k[None, :] - np.arange(DELAY_PHASES)[:, None] / DELAY_PHASES)
        taps = kernels.T @ train
        for j in range(SINC_TAPS):
            out[j : j + width] += taps[j]
    return out[half : half + n_samples]


def _decay_t60(energy: np.ndarray, bin_s: float, fit_db: tuple[float, float]) -> float:
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    hi, lo = fit_db
    sel = np.nonzero((edc_db <= hi) & (edc_db >= lo))[0]
    if sel.size < 2:
        return 0.0
    slope, _ = np.polyfit(sel * bin_s, edc_db[sel], 1)
    return -60.0 / slope if slope < 0 else math.inf


def calibrate_absorption(
    dist: np.ndarray,
    order: np.ndarray,
    t60_s: float,
    fit_db: tuple[float, float] = (-5.0, -25.0),
    bin_s: float = 1e-3,
) -> float:
    """Uniform absorption whose image-source energy decay matches ``t60_s``.

    The decay curve is computed from the image energies binned by arrival time
    and reflection order, so each trial absorption costs one small matrix-vector
    product. Bisection on alpha (T60 decreases monotonically with alpha).
    """
    n_bins = int(dist.max() / SPEED_OF_SOUND / bin_s) + 1
    t_bin = (dist / SPEED_OF_SOUND / bin_s).astype(np.int64)
    k_max = int(order.max())
    table = np.bincount(
        order * n_bins + t_bin,
        weights=1.0 / (16.0 * math.pi**2 * dist**2),
        minlength=(k_max + 1) * n_bins,
    ).reshape(k_max + 1, n_bins)
    ks = np.arange(k_max + 1)
    lo, hi = 1e-4, 0.99
    for _ in range(50):
        alpha = 0.5 * (lo + hi)
        t60 = _decay_t60((1.0 - alpha) ** ks @ table, bin_s, fit_db)
        if t60 > t60_s:
            lo = alpha
        else:
            hi = alpha
    return 0.5 * (lo + hi)


def simulate_rir(
    room: RoomSpec,
    sample_rate_hz: int = 16000,
    duration_s: float | None = None,
    absorption: str | float = "calibrated",
    max_order: int | None = None,
    highpass_hz: float | None = HIGHPASS_HZ,
) -> RirSet:
    """Image-source RIRs from the room's source to each of its microphones.

    Args:
        room: Geometry and target T60.
        sample_rate_hz: Output sample rate.
        duration_s: RIR length; defaults to 1.5 * T60.
        absorption: ``"calibrated"`` fits the uniform wall absorption so the
            simulated decay hits ``room.t60_s``; ``"sabine"`` uses
            :func:`sabine_absorption` directly; a float is used as-is.
        max_order: Optional cap on the total reflection order (0 keeps only
            the direct path).
        highpass_hz: Cutoff of the 2nd-order Butterworth high-pass applied to
            every RIR; ``None`` returns the raw image sum.
    """
    if duration_s is None:
        duration_s = 1.5 * room.t60_s
    if duration_s < 1.2 * room.t60_s:
        raise ValueError(
            f"duration {duration_s:.3f} s shorter than 1.2*T60 = {1.2 * room.t60_s:.3f} s"
        )
    if sample_rate_hz < 8000:
        raise ValueError(f"sample rate {sample_rate_hz} Hz below 8000 Hz")
    dims = room.dims
    for i, m in enumerate(room.mic_positions):
        if not all(0.0 <= m[a] <= dims[a] for a in range(3)):
            raise ValueError(f"mic {i} at {m} is outside the room {list(dims)}")
    n_samples = int(round(duration_s * sample_rate_hz))
    max_dist = duration_s * SPEED_OF_SOUND
    xs, ys, zs, order = _image_sources(room, max_dist)
    if max_order is not None:
        sel = order <= max_order
        xs, ys, zs, order = xs[sel], ys[sel], zs[sel], order[sel]

    def distances(mic):
        d = (xs - mic[0]) ** 2
        d += (ys - mic[1]) ** 2
        d += (zs - mic[2]) ** 2
        return np.sqrt(d, out=d)

    if absorption == "calibrated":
        d0 = distances(room.mic_positions[0])
        keep = d0 <= max_dist
        alpha = calibrate_absorption(np.maximum(d0[keep], 1e-3), order[keep], room.t60_s)
    elif absorption == "sabine":
        alpha = sabine_absorption(room)
    else:
        alpha = float(absorption)
    beta = math.sqrt(1.0 - alpha)
    gains = beta ** order.astype(np.float64)
    rirs = np.zeros((room.mic_count, n_samples))
    for i, mic in enumerate(room.mic_positions):
        dist = distances(mic)
        keep = dist <= max_dist
        dist = np.maximum(dist[keep], 1e-3)
        delays = dist * (sample_rate_hz / SPEED_OF_SOUND)
        amps = gains[keep] / (4.0 * math.pi * dist)
        split = delays.min() + EXACT_WINDOW_S * sample_rate_hz
        rirs[i] = _render(delays, amps, n_samples, split)
    if highpass_hz:
        sos = scipy.signal.butter(2, highpass_hz, "highpass", fs=sample_rate_hz, output="sos")
        rirs = scipy.signal.sosfilt(sos, rirs, axis=1)
    return RirSet(
        sample_rate_hz=sample_rate_hz,
        rirs=rirs,
        room=room,
        meta={"absorption": alpha},
    )


def schroeder_curve(rir: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB, normalized to 0 dB at t=0."""
    energy = np.cumsum(np.asarray(rir, dtype=np.float64)[::-1] ** 2)[::-1]
    return 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))


def estimate_t60(rir: np.ndarray, sample_rate_hz: int, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """T60 extrapolated from a line fit to the Schroeder curve between ``fit_db`` levels."""
    edc = schroeder_curve(rir)
    hi, lo = fit_db
    sel = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if sel.size < 2:
        raise ValueError("decay range too short to estimate T60")
    t = sel / sample_rate_hz
    slope, _ = np.polyfit(t, edc[sel], 1)
    return -60.0 / slope
