"""Corpus manifests, actor-exclusive splits, packed video clips and the toy audiovisual corpus."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acoustics import RirSet, RoomSpec
from .synth import load_audio
from .wavio import write_wav

logger = logging.getLogger(__name__)

EMOTIONS = ("neutral", "calm", "happy", "sad", "angry", "fearful", "disgust", "surprised")
EMOTION_INDEX = {name: i for i, name in enumerate(EMOTIONS)}
SPLITS = ("train", "val", "test")

PCLP_MAGIC = b"PCLP"
PCLP_VERSION = 1


def label_name(index: int) -> str:
    return EMOTIONS[index]


def label_index(name: str) -> int:
    try:
        return EMOTION_INDEX[name]
    except KeyError:
        raise ValueError(f"unknown emotion {name!r}; expected one of {EMOTIONS}") from None


# -- video clips -------------------------------------------------------------


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, 3) uint8
    frame_rate_hz: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be uint8 (N, H, W, 3), got {self.frames.dtype} {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


def write_clip(path, clip: VideoClip) -> None:
    n, h, w, _ = clip.frames.shape
    header = PCLP_MAGIC + struct.pack("<IIII", PCLP_VERSION, n, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(clip.frames).tobytes())


def read_clip(path, frame_rate_hz: float = 30.0) -> VideoClip:
    data = Path(path).read_bytes()
    if data[:4] != PCLP_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {PCLP_MAGIC!r}")
    version, n, h, w = struct.unpack_from("<IIII", data, 4)
    if version != PCLP_VERSION:
        raise ValueError(f"{path}: unsupported PCLP version {version}")
    expected = 20 + n * h * w * 3
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} != {expected} for {n}x{h}x{w} frames")
    frames = np.frombuffer(data, dtype=np.uint8, offset=20).reshape(n, h, w, 3).copy()
    return VideoClip(frames, frame_rate_hz)


# -- manifest ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    utterance_id: str
    actor_id: int
    label: int
    clean_audio_path: str
    multichannel_audio_path: str | None = None
    video_clip_path: str | None = None
    rir_provenance: str | None = None
    split: str = "train"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def actors(self) -> list[int]:
        return sorted({e.actor_id for e in self.entries})

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(ManifestEntry(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        return cls(entries, path.parent)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), ensure_ascii=False) + "\n")

    def validate(self, check_paths: bool = True) -> None:
        """Raise ``ValueError`` listing every broken manifest invariant."""
        problems = []
        seen: dict[int, str] = {}
        ids = set()
        for e in self.entries:
            if e.utterance_id in ids:
                problems.append(f"duplicate utterance_id {e.utterance_id}")
            ids.add(e.utterance_id)
            if e.split not in SPLITS:
                problems.append(f"{e.utterance_id}: unknown split {e.split!r}")
            if not 0 <= e.label < len(EMOTIONS):
                problems.append(f"{e.utterance_id}: label {e.label} outside [0, {len(EMOTIONS)})")
            prev = seen.setdefault(e.actor_id, e.split)
            if prev != e.split:
                problems.append(f"actor {e.actor_id} appears in both {prev} and {e.split}")
            if check_paths:
                for attr in ("clean_audio_path", "multichannel_audio_path", "video_clip_path"):
                    p = self.resolve(getattr(e, attr))
                    if p is not None and not p.exists():
                        problems.append(f"{e.utterance_id}: {attr} {p} does not exist")
        if problems:
            raise ValueError("invalid manifest: " + "; ".join(dict.fromkeys(problems)))


def build_split(actor_ids, ratios=(0.8, 0.1, 0.1), rng_seed: int = 0) -> dict[int, str]:
    """Assign each actor to exactly one of train/val/test.

    Counts: train = floor(n * r_train), val = round(n * r_val), test takes
    the rest. 24 actors at (0.8, 0.1, 0.1) gives 19/2/3.
    """
    actors = sorted(set(int(a) for a in actor_ids))
    if len(actors) < 3:
        raise ValueError(f"need at least 3 actors, got {len(actors)}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(actors)
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split sizes ({n_train}, {n_val}, {n_test}) leave a split empty")
    order = np.random.default_rng(rng_seed).permutation(actors)
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return {int(a): s for a, s in zip(order, names)}


def assign_splits(manifest: Manifest, ratios=(0.8, 0.1, 0.1), rng_seed: int = 0) -> Manifest:
    mapping = build_split(manifest.actors(), ratios, rng_seed)
    for e in manifest.entries:
        e.split = mapping[e.actor_id]
    return manifest


def parse_ravdess_name(name: str) -> dict:
    """Decode a RAVDESS file stem such as ``03-01-06-01-02-01-12``."""
    parts = Path(name).stem.split("-")
    if len(parts) != 7 or not all(p.isdigit() for p in parts):
        raise ValueError(f"not a RAVDESS file name: {name}")
    modality, channel, emotion, intensity, statement, repetition, actor = (int(p) for p in parts)
    return {
        "modality": modality,
        "vocal_channel": channel,
        "label": emotion - 1,
        "intensity": intensity,
        "statement": statement,
        "repetition": repetition,
        "actor_id": actor,
        "utterance_id": "-".join(parts[2:]),
    }


def manifest_from_ravdess(audio_dir, video_dir=None, ratios=(0.8, 0.1, 0.1), rng_seed: int = 0) -> Manifest:
    """Index RAVDESS speech WAVs (and optional pre-packed PCLP clips) by file name."""
    audio_dir = Path(audio_dir)
    clips = {}
    if video_dir is not None:
        for p in sorted(Path(video_dir).rglob("*.pclp")):
            try:
                clips[parse_ravdess_name(p.name)["utterance_id"]] = str(p.resolve())
            except ValueError:
                logger.warning("skipping %s: unrecognised name", p)
    entries = []
    for p in sorted(audio_dir.rglob("*.wav")):
        try:
            info = parse_ravdess_name(p.name)
        except ValueError:
            logger.warning("skipping %s: unrecognised name", p)
            continue
        uid = info["utterance_id"]
        entries.append(
            ManifestEntry(
                utterance_id=uid,
                actor_id=info["actor_id"],
                label=info["label"],
                clean_audio_path=str(p.resolve()),
                video_clip_path=clips.get(uid),
            )
        )
    return assign_splits(Manifest(entries, Path(".")), ratios, rng_seed)


# -- external RIRs -----------------------------------------------------------


def ingest_external_rirs(directory, sample_rate_hz: int = 16000) -> list[RirSet]:
    """Load every multi-channel WAV in ``directory`` as a named RirSet.

    A JSON sidecar with the same stem may hold a full RoomSpec or loose
    metadata such as ``{"t60_s": 0.638}``. Unreadable files are logged and
    skipped.
    """
    directory = Path(directory)
    out = []
    for p in sorted(directory.glob("*.wav")):
        try:
            audio = load_audio(p, sample_rate_hz)
        except Exception as exc:  # noqa: BLE001 - one bad file must not stop the rest
            logger.error("cannot read RIR file %s: %s", p, exc)
            continue
        room, meta = None, {}
        sidecar = p.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            if "mic_positions" in meta:
                room = RoomSpec.from_dict(meta)
        out.append(RirSet(sample_rate_hz, audio.channels, room=room, name=p.stem, meta=meta))
    if not out:
        logger.warning("no RIR files found in %s", directory)
    return out


def write_rirset(path, rirset: RirSet) -> None:
    """Multi-channel float32 WAV plus a JSON sidecar with the room description."""
    path = Path(path)
    write_wav(path, rirset.rirs, rirset.sample_rate_hz, "float32")
    meta = dict(rirset.meta)
    if rirset.room is not None:
        meta.update(asdict(rirset.room))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- toy corpus --------------------------------------------------------------


@dataclass
class ToyCorpusConfig:
    n_per_class: int = 200
    n_actors: int = 10
    sample_rate_hz: int = 16000
    duration_s: float = 0.64
    tone_hz: tuple[float, float] = (400.0, 800.0)
    tone_amplitude: float = 0.3
    audio_noise_std: float = 0.1
    frames: int = 10
    frame_size: int = 32
    square_size: int = 6
    step_px: int = 2
    video_noise_std: float = 12.0
    noise: bool = True


def toy_audio(audio_bit: int, rng: np.random.Generator, cfg: ToyCorpusConfig) -> np.ndarray:
    n = int(round(cfg.duration_s * cfg.sample_rate_hz))
    t = np.arange(n) / cfg.sample_rate_hz
    amp = cfg.tone_amplitude * rng.uniform(0.7, 1.3)
    x = amp * np.sin(2 * np.pi * cfg.tone_hz[audio_bit] * t + rng.uniform(0, 2 * np.pi))
    if cfg.noise:
        x = x + cfg.audio_noise_std * rng.standard_normal(n)
    return x


def toy_frames(video_bit: int, rng: np.random.Generator, cfg: ToyCorpusConfig) -> np.ndarray:
    """Bright square drifting left (bit 0) or right (bit 1) across the clip."""
    size, sq, travel = cfg.frame_size, cfg.square_size, cfg.step_px * (cfg.frames - 1)
    if sq + travel > size:
        raise ValueError("square path does not fit in the frame")
    x0 = int(rng.integers(0, size - sq - travel + 1))
    y0 = int(rng.integers(0, size - sq + 1))
    color = rng.uniform(180, 255, size=3)
    base = np.full((cfg.frames, size, size, 3), 30.0)
    if cfg.noise:
        base += cfg.video_noise_std * rng.standard_normal(base.shape)
    direction = 1 if video_bit else -1
    start = x0 if video_bit else x0 + travel
    for f in range(cfg.frames):
        x = start + direction * cfg.step_px * f
        base[f, y0 : y0 + sq, x : x + sq, :] = color
    return np.clip(np.round(base), 0, 255).astype(np.uint8)


def generate_toy_corpus(out_dir, n_per_class: int = 200, rng_seed: int = 0, cfg: ToyCorpusConfig | None = None) -> Manifest:
    """Write a 4-class audiovisual corpus whose label needs both modalities.

    Label = 2 * audio_bit + video_bit: the tone frequency carries the audio
    bit and the square's drift direction the video bit, so each modality
    alone separates only two pairs of classes.
    """
    cfg = cfg or ToyCorpusConfig()
    if n_per_class < 4:
        raise ValueError(f"n_per_class must be >= 4, got {n_per_class}")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "video").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(rng_seed)
    entries = []
    for label in range(4):
        for j in range(n_per_class):
            rng = np.random.default_rng(root.spawn(1)[0])
            uid = f"toy-{label}-{j:04d}"
            audio_bit, video_bit = divmod(label, 2)
            write_wav(out_dir / "audio" / f"{uid}.wav", toy_audio(audio_bit, rng, cfg), cfg.sample_rate_hz, "pcm16")
            write_clip(out_dir / "video" / f"{uid}.pclp", VideoClip(toy_frames(video_bit, rng, cfg)))
            entries.append(
                ManifestEntry(
                    utterance_id=uid,
                    actor_id=1 + (label * n_per_class + j) % cfg.n_actors,
                    label=label,
                    clean_audio_path=f"audio/{uid}.wav",
                    video_clip_path=f"video/{uid}.pclp",
                )
            )
    manifest = assign_splits(Manifest(entries, out_dir), (0.8, 0.1, 0.1), rng_seed)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
