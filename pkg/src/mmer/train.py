"""Training loop, evaluation, bootstrap confidence intervals and per-room benchmarking."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .acoustics import RirSet, estimate_t60
from .corpus import EMOTIONS, Manifest, ManifestEntry, read_clip
from .frontend import FrontendConfig, MelTensor, SpecAugmentConfig, average_channels, mel_spectrogram, read_melt, spec_augment
from .model import MERModel, ModelConfig, predict
from .nncore import ParamStore, adam_step, cross_entropy
from .seeding import derive_seed
from .synth import AudioSignal, convolve_rir, load_audio, mix_at_snr
from .video_encoder import sample_and_augment

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 12
    warmup_steps: int = 500
    seed: int = 0
    monitor: str = "val_loss"
    augment: bool = True
    audio_source: str = "clean"  # or "multichannel"
    reference_channel: int = 0
    specaugment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if isinstance(self.specaugment, dict):
            self.specaugment = SpecAugmentConfig(**self.specaugment)
        for name in ("lr", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.monitor != "val_loss":
            raise ValueError(f"unsupported monitor {self.monitor!r}")
        if self.audio_source not in ("clean", "multichannel"):
            raise ValueError(f"audio_source must be 'clean' or 'multichannel', got {self.audio_source!r}")


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps`` optimizer steps, then flat."""
    if warmup_steps == 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


class EarlyStopping:
    """Stops once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; returns True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.wait == 0


# -- data --------------------------------------------------------------------


@dataclass
class ExampleSet:
    """Model-ready tensors for one split."""

    ids: list[str]
    labels: np.ndarray
    mel: torch.Tensor | None = None  # (N, C, F, T)
    frames: torch.Tensor | None = None  # (N, frames, 3, crop, crop), eval-mode
    clips: list | None = None  # raw clips, kept for training-time augmentation

    def __len__(self) -> int:
        return len(self.ids)


def fit_frames(mel: np.ndarray, frames: int) -> np.ndarray:
    """Crop or mirror-pad the time axis of (C, F, T) to ``frames``."""
    mel = mel[..., :frames]
    while mel.shape[-1] < frames:
        need = min(frames - mel.shape[-1], max(mel.shape[-1] - 1, 1))
        tail = mel[..., -1 - need : -1][..., ::-1] if mel.shape[-1] > 1 else mel
        mel = np.concatenate([mel, tail[..., :need]], axis=-1)
    return mel


def select_channels(mel: MelTensor, fusion_mode: str, reference_channel: int = 0) -> MelTensor:
    """Channel handling for each audio fusion mode."""
    if fusion_mode == "single":
        ch = min(reference_channel, mel.channels - 1)
        return MelTensor(mel.data[ch : ch + 1], mel.sample_rate_hz, mel.hop_samples)
    if fusion_mode == "avg_mel":
        return average_channels(mel)
    return mel


def entry_mel(manifest: Manifest, e: ManifestEntry, source: str, frontend: FrontendConfig, cache_dir=None) -> MelTensor:
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{e.utterance_id}.{source}.melt"
        if cached.exists():
            return read_melt(cached, frontend.sample_rate_hz, frontend.hop_samples)
    path = e.clean_audio_path if source == "clean" else e.multichannel_audio_path
    if path is None:
        raise ValueError(f"{e.utterance_id}: no {source} audio in manifest")
    return mel_spectrogram(load_audio(manifest.resolve(path), frontend.sample_rate_hz), frontend)


def build_examples(
    manifest: Manifest,
    entries: list[ManifestEntry],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    frontend: FrontendConfig = FrontendConfig(),
    mels: list[MelTensor] | None = None,
    cache_dir=None,
    keep_clips: bool = False,
) -> ExampleSet:
    """Load audio features and eval-mode video frames for ``entries``.

    ``mels`` overrides the audio (used by benchmarking to feed reverberated
    versions of the same utterances).
    """
    if not entries:
        raise ValueError("empty split")
    ids = [e.utterance_id for e in entries]
    labels = np.array([e.label for e in entries], dtype=np.int64)
    out = ExampleSet(ids, labels)
    if model_cfg.uses_audio:
        if mels is None:
            mels = [entry_mel(manifest, e, train_cfg.audio_source, frontend, cache_dir) for e in entries]
        acfg = model_cfg.audio
        arr = [
            fit_frames(select_channels(m, acfg.fusion_mode, train_cfg.reference_channel).data, acfg.frames)
            for m in mels
        ]
        out.mel = torch.from_numpy(np.stack(arr).astype(np.float32))
    if model_cfg.uses_video:
        clips = []
        for e in entries:
            if e.video_clip_path is None:
                raise ValueError(f"{e.utterance_id}: no video clip in manifest")
            clips.append(read_clip(manifest.resolve(e.video_clip_path)))
        vcfg = model_cfg.video
        out.frames = torch.stack(
            [sample_and_augment(c, vcfg, False, derive_seed(train_cfg.seed, "eval", uid)) for c, uid in zip(clips, ids)]
        )
        if keep_clips:
            out.clips = clips
    return out


def _batch(examples: ExampleSet, idx, model_cfg: ModelConfig, train_cfg: TrainConfig, epoch: int | None):
    """Mel and frame tensors for ``idx``; training-time augmentation when ``epoch`` is given."""
    mel = frames = None
    augment = epoch is not None and train_cfg.augment
    if examples.mel is not None:
        mel = examples.mel[idx]
        if augment:
            mel = torch.stack(
                [
                    torch.from_numpy(spec_augment(MelTensor(m.numpy()), derive_seed(train_cfg.seed, "specaug", epoch, examples.ids[i]), train_cfg.specaugment).data)
                    for m, i in zip(mel, idx)
                ]
            )
    if examples.frames is not None:
        if augment and examples.clips is not None:
            frames = torch.stack(
                [
                    sample_and_augment(examples.clips[i], model_cfg.video, True, derive_seed(train_cfg.seed, "video", epoch, examples.ids[i]))
                    for i in idx
                ]
            )
        else:
            frames = examples.frames[idx]
    return mel, frames


@torch.no_grad()
def run_inference(model: MERModel, examples: ExampleSet, batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Logits for every example and the mean cross-entropy."""
    model.eval()
    logits = []
    for start in range(0, len(examples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(examples)))
        mel = examples.mel[idx] if examples.mel is not None else None
        frames = examples.frames[idx] if examples.frames is not None else None
        logits.append(model(mel, frames))
    out = torch.cat(logits)
    loss = float(cross_entropy(out, torch.from_numpy(examples.labels)))
    return out.numpy(), loss


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: ckpt_io.ModelCheckpoint
    history: list[dict]
    model: MERModel
    best_epoch: int


def checkpoint_config(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> dict:
    cfg = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        cfg["train"] = asdict(train_cfg)
    if extra:
        cfg.update(extra)
    return cfg


def model_from_checkpoint(ck: ckpt_io.ModelCheckpoint) -> MERModel:
    model = MERModel(ModelConfig.from_dict(ck.config["model"]))
    ckpt_io.load_into(model, ck)
    model.eval()
    return model


def train(
    model_cfg: ModelConfig,
    train_set: ExampleSet,
    val_set: ExampleSet,
    train_cfg: TrainConfig = TrainConfig(),
    log_every_epoch: bool = True,
) -> TrainResult:
    """Adam with linear warm-up; early stopping on validation loss; best checkpoint kept."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and val splits must be non-empty")
    torch.manual_seed(train_cfg.seed)
    model = MERModel(model_cfg)
    store = ParamStore.from_module(model)
    stopper = EarlyStopping(train_cfg.patience)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, "shuffle"))
    labels = torch.from_numpy(train_set.labels)
    history = []
    best_state = None
    step = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            mel, frames = _batch(train_set, idx, model_cfg, train_cfg, epoch)
            loss = cross_entropy(model(mel, frames), labels[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, step {step + 1}")
            store.zero_grad()
            loss.backward()
            step += 1
            adam_step(store, warmup_lr(step, train_cfg.lr, train_cfg.warmup_steps))
            total += loss.item() * len(idx)
            seen += len(idx)
        logits, val_loss = run_inference(model, val_set)
        val_acc = float(np.mean(predict(torch.from_numpy(logits)).numpy() == val_set.labels))
        stop = stopper.update(epoch, val_loss)
        row = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": warmup_lr(step, train_cfg.lr, train_cfg.warmup_steps),
        }
        history.append(row)
        if log_every_epoch:
            logger.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f", epoch, row["train_loss"], val_loss, val_acc)
        if stopper.improved_last:
            best_state = (copy.deepcopy(model.state_dict()), ckpt_io.from_model(model, {}, store))
        if stop:
            break
    model.load_state_dict(best_state[0])
    ck = best_state[1]
    ck.config = checkpoint_config(model_cfg, train_cfg, {"best_epoch": stopper.best_epoch})
    model.eval()
    return TrainResult(ck, history, model, stopper.best_epoch)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_acc", "lr"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# -- evaluation ----------------------------------------------------------------


def bootstrap_ci(correct, level: float = 0.75, n_boot: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean of a 0/1 correctness vector."""
    x = np.asarray(correct, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap_ci needs at least one observation")
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, n_boot, chunk):
        stop = min(start + chunk, n_boot)
        stats[start:stop] = x[rng.integers(0, x.size, size=(stop - start, x.size))].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return float(low), float(high)


def confusion_percent(labels, preds, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized confusion matrix in percent, plus raw row counts."""
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
    rows = counts.sum(axis=1)
    pct = np.zeros((k, k))
    nz = rows > 0
    pct[nz] = 100.0 * counts[nz] / rows[nz, None]
    return pct, rows


@dataclass
class EvalReport:
    condition: str
    accuracy: float
    ci_low: float
    ci_high: float
    confusion: list[list[float]]
    predictions: list[dict] = field(default_factory=list)
    absent_classes: list[int] = field(default_factory=list)
    mode: str = ""
    room: str = ""
    t60_ms: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(ids, labels, preds, class_count: int, condition: str, ci_seed: int = 0, n_boot: int = 10_000) -> EvalReport:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = labels == preds
    acc = float(correct.mean())
    low, high = bootstrap_ci(correct, 0.75, n_boot, ci_seed)
    pct, rows = confusion_percent(labels, preds, class_count)
    absent = [int(c) for c in np.nonzero(rows == 0)[0]]
    if absent:
        logger.warning("%s: classes %s absent from the evaluated split", condition, absent)
    return EvalReport(
        condition=condition,
        accuracy=acc,
        ci_low=min(low, acc),
        ci_high=max(high, acc),
        confusion=pct.tolist(),
        predictions=[{"utterance_id": i, "label": int(l), "prediction": int(p)} for i, l, p in zip(ids, labels, preds)],
        absent_classes=absent,
    )


def evaluate(model: MERModel, examples: ExampleSet, condition: str = "", ci_seed: int = 0) -> EvalReport:
    logits, _ = run_inference(model, examples)
    preds = predict(torch.from_numpy(logits)).numpy()
    return evaluate_predictions(examples.ids, examples.labels, preds, model.cfg.fusion.class_count, condition, ci_seed)


def write_confusion_csv(path, report: EvalReport, class_names=EMOTIONS) -> None:
    k = len(report.confusion)
    names = list(class_names[:k]) if len(class_names) >= k else [str(i) for i in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, report.confusion):
            w.writerow([name] + [f"{v:.2f}" for v in row])


# -- room benchmark ------------------------------------------------------------

AUDIO_FUSION_MODES = {"clean_single": "single", "rev_single": "single", "avg_mel": "avg_mel", "sum_pe": "sum_pe"}
BENCHMARK_MODES = (
    ["video_only"]
    + [f"audio_{k}" for k in AUDIO_FUSION_MODES]
    + [f"mer_{k}" for k in AUDIO_FUSION_MODES]
)


def rir_t60_ms(rirset: RirSet) -> float | None:
    if "t60_s" in rirset.meta:
        return 1000.0 * float(rirset.meta["t60_s"])
    if rirset.room is not None:
        return 1000.0 * rirset.room.t60_s
    try:
        return 1000.0 * float(np.median([estimate_t60(h, rirset.sample_rate_hz) for h in rirset.rirs]))
    except ValueError:
        return None


def reverberate_split(
    manifest: Manifest,
    entries: list[ManifestEntry],
    rirset: RirSet,
    frontend: FrontendConfig = FrontendConfig(),
    snr_db: float | None = None,
    seed: int = 0,
) -> list[MelTensor]:
    """Log-mels of every clean test utterance convolved with the room's RIRs."""
    mels = []
    for e in entries:
        clean = load_audio(manifest.resolve(e.clean_audio_path), frontend.sample_rate_hz)
        rev = convolve_rir(AudioSignal(clean.sample_rate_hz, clean.channels[0]), rirset)
        rev.channels = rev.channels[:, : clean.channels.shape[1]]
        if snr_db is not None:
            rev = mix_at_snr(rev, snr_db, rng_seed=derive_seed(seed, rirset.name, e.utterance_id))
        mels.append(mel_spectrogram(rev, frontend))
    return mels


def benchmark_rooms(
    models: dict[str, MERModel],
    manifest: Manifest,
    rirsets: list[RirSet],
    modes=BENCHMARK_MODES,
    frontend: FrontendConfig = FrontendConfig(),
    snr_db: float | None = None,
    seed: int = 0,
    reference_channel: int = 0,
) -> list[EvalReport]:
    """One report per (room, mode) on the reverberated test split; video-only once."""
    entries = manifest.split("test")
    if not entries:
        raise ValueError("manifest has no test split")
    reports = []
    eval_cfg = TrainConfig(seed=seed, reference_channel=reference_channel)
    if "video_only" in modes:
        if "video_only" not in models:
            logger.warning("no checkpoint for mode video_only; skipping")
        else:
            m = models["video_only"]
            ex = build_examples(manifest, entries, m.cfg, eval_cfg, frontend)
            rep = evaluate(m, ex, "video_only", seed)
            rep.mode, rep.room = "video_only", "*"
            reports.append(rep)
    for rirset in rirsets:
        mels = reverberate_split(manifest, entries, rirset, frontend, snr_db, seed)
        t60 = rir_t60_ms(rirset)
        for mode in modes:
            if mode == "video_only":
                continue
            if mode not in models:
                logger.warning("no checkpoint for mode %s; skipping", mode)
                continue
            m = models[mode]
            ex = build_examples(manifest, entries, m.cfg, eval_cfg, frontend, mels=mels)
            cond = f"{rirset.name} ({t60:.0f} ms)" if t60 is not None else rirset.name
            rep = evaluate(m, ex, f"{cond} {mode}", seed)
            rep.mode, rep.room, rep.t60_ms = mode, rirset.name, t60
            reports.append(rep)
    return reports


def write_reports(json_path, csv_path, reports: list[EvalReport]) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["room", "t60_ms", "mode", "acc", "ci_low", "ci_high"])
            for r in reports:
                t60 = "" if r.t60_ms is None else f"{r.t60_ms:.0f}"
                w.writerow([r.room, t60, r.mode, f"{100 * r.accuracy:.1f}", f"{100 * r.ci_low:.1f}", f"{100 * r.ci_high:.1f}"])


# -- embeddings ----------------------------------------------------------------


@torch.no_grad()
def compute_embeddings(model: MERModel, examples: ExampleSet, kind: str = "fused", batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(examples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(examples)))
        mel = examples.mel[idx] if examples.mel is not None else None
        frames = examples.frames[idx] if examples.frames is not None else None
        emb = model.embed(mel, frames)
        if kind not in emb:
            raise ValueError(f"embedding {kind!r} not available for a {model.cfg.fusion.mode} model")
        out.append(emb[kind])
    return torch.cat(out).numpy()


def export_embeddings(model: MERModel, examples: ExampleSet, path, kind: str = "fused") -> np.ndarray:
    """CSV with one row per utterance: utterance_id, label, embedding values."""
    emb = compute_embeddings(model, examples, kind)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for uid, label, row in zip(examples.ids, examples.labels, emb):
            w.writerow([uid, int(label)] + [repr(float(v)) for v in row])
    return emb
