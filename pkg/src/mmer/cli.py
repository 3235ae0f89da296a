"""Command-line driver: ``mmer <command> ...``.

Every command reads and writes artifacts on disk (WAV, PCLP, MELT, EMCK,
JSON, CSV) so stages can be rerun independently. Failures print a single
JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint as ckpt_io
from .acoustics import RoomSpec, sample_room, simulate_rir
from .config import PRESETS, ConfigError, PipelineConfig, dumps, load_config
from .corpus import Manifest, generate_toy_corpus, ingest_external_rirs, manifest_from_ravdess, write_rirset
from .frontend import mel_spectrogram, write_melt
from .seeding import derive_seed
from .synth import AudioSignal, convolve_rir, load_audio, mix_at_snr, save_audio
from .train import (
    BENCHMARK_MODES,
    benchmark_rooms,
    build_examples,
    evaluate,
    export_embeddings,
    model_from_checkpoint,
    train,
    write_confusion_csv,
    write_history,
    write_reports,
)

logger = logging.getLogger("mmer")

# Output directories may be redirected through the environment; nothing else is.
ENV_OUTPUT_DIR = "MMER_OUTPUT_DIR"
ENV_CACHE_DIR = "MMER_CACHE_DIR"


class MissingInput(FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = str(path)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(p)
    return p


def _out(path) -> Path:
    p = Path(path)
    base = os.environ.get(ENV_OUTPUT_DIR)
    return Path(base) / p if base and not p.is_absolute() else p


def _absorption(cfg: PipelineConfig):
    a = cfg.acoustics.absorption
    return a if a in ("calibrated", "sabine") else float(a)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# -- rir simulate ---------------------------------------------------------------


def room_with_t60(seed: int, t60_s: float, mic_count: int, max_tries: int = 1000) -> RoomSpec:
    """First sampled room, over derived seeds, that stays valid with T60 forced to ``t60_s``."""
    for k in range(max_tries):
        room = dataclasses.replace(sample_room(derive_seed(seed, "t60", t60_s, k), mic_count), t60_s=t60_s)
        if not room.violations():
            return room
    raise RuntimeError(f"no valid room with T60 {t60_s} s after {max_tries} tries")


def _simulate_one(job):
    cfg, idx, t60, out_dir = job
    seed = derive_seed(cfg.pipeline.seed, "rir", idx)
    room = sample_room(seed, cfg.acoustics.mic_count) if t60 is None else room_with_t60(seed, t60, cfg.acoustics.mic_count)
    rirset = simulate_rir(room, cfg.acoustics.sample_rate_hz, cfg.acoustics.duration_s, _absorption(cfg))
    name = f"room{idx:03d}"
    rirset.name = name
    rirset.meta["t60_s"] = room.t60_s
    write_rirset(Path(out_dir) / f"{name}.wav", rirset)
    return name


def cmd_rir_simulate(cfg: PipelineConfig, args) -> dict:
    t60s = [float(x) for x in args.t60.split(",")] if args.t60 else [None]
    for t in t60s:
        if t is not None and not 0.5 <= t <= 0.85:
            raise ConfigError("--t60", f"{t} s outside the simulated range [0.5, 0.85] s")
    jobs = [(cfg, i * len(t60s) + j, t, str(args.out)) for i in range(args.count) for j, t in enumerate(t60s)]
    plan = {"outputs": [str(Path(args.out) / f"room{j[1]:03d}.wav") for j in jobs]}
    if args.dry_run:
        return plan
    Path(args.out).mkdir(parents=True, exist_ok=True)
    names = _map(_simulate_one, jobs, cfg.pipeline.jobs)
    return {"rooms": names}


# -- dataset ----------------------------------------------------------------------


def _synthesize_one(job):
    cfg, manifest, entry, out_dir, mics = job
    room_seed = derive_seed(cfg.pipeline.seed, "room", entry.utterance_id)
    room = sample_room(room_seed, mics)
    rirset = simulate_rir(room, cfg.acoustics.sample_rate_hz, cfg.acoustics.duration_s, _absorption(cfg))
    clean = load_audio(manifest.resolve(entry.clean_audio_path), cfg.acoustics.sample_rate_hz)
    reverb = convolve_rir(AudioSignal(clean.sample_rate_hz, clean.channels[0]), rirset)
    noise_seed = derive_seed(cfg.pipeline.seed, "noise", entry.utterance_id)
    mixed = mix_at_snr(reverb, cfg.synth.snr_db, cfg.synth.noise_coeff, noise_seed)
    rel = f"multichannel/{entry.utterance_id}.wav"
    save_audio(Path(out_dir) / rel, mixed, cfg.synth.subtype)
    return rel, f"sim:seed={room_seed}"


def _rebase(manifest: Manifest, path: str | None, out_dir: Path) -> str | None:
    if path is None:
        return None
    return os.path.relpath(manifest.resolve(path).resolve(), out_dir.resolve())


def cmd_dataset_synthesize(cfg: PipelineConfig, args) -> dict:
    manifest = Manifest.read(_require(args.manifest))
    out_dir = Path(args.out)
    mics = args.mics or cfg.acoustics.mic_count
    plan = {"utterances": len(manifest), "mics": mics, "outputs": [str(out_dir / "multichannel"), str(out_dir / "manifest.jsonl")]}
    if args.dry_run:
        return plan
    for e in manifest.entries:
        _require(manifest.resolve(e.clean_audio_path))
    (out_dir / "multichannel").mkdir(parents=True, exist_ok=True)
    results = _map(_synthesize_one, [(cfg, manifest, e, str(out_dir), mics) for e in manifest.entries], cfg.pipeline.jobs)
    entries = []
    for e, (rel, prov) in zip(manifest.entries, results):
        entries.append(
            dataclasses.replace(
                e,
                clean_audio_path=_rebase(manifest, e.clean_audio_path, out_dir),
                video_clip_path=_rebase(manifest, e.video_clip_path, out_dir),
                multichannel_audio_path=rel,
                rir_provenance=prov,
            )
        )
    out = Manifest(entries, out_dir)
    out.write(out_dir / "manifest.jsonl")
    return {"utterances": len(entries), "manifest": str(out_dir / "manifest.jsonl")}


def cmd_dataset_toy(cfg: PipelineConfig, args) -> dict:
    n = args.n_per_class or cfg.toy.n_per_class
    plan = {"classes": 4, "n_per_class": n, "outputs": [str(Path(args.out) / "manifest.jsonl")]}
    if args.dry_run:
        return plan
    m = generate_toy_corpus(args.out, n, cfg.pipeline.seed, dataclasses.replace(cfg.toy, n_per_class=n))
    return {"utterances": len(m), "manifest": str(Path(args.out) / "manifest.jsonl")}


def cmd_dataset_ravdess(cfg: PipelineConfig, args) -> dict:
    _require(args.audio)
    if args.video:
        _require(args.video)
    if args.dry_run:
        return {"outputs": [str(args.out)]}
    m = manifest_from_ravdess(args.audio, args.video, rng_seed=cfg.pipeline.seed)
    m.base_dir = Path(args.out).parent
    m.write(args.out)
    return {"utterances": len(m), "manifest": str(args.out)}


# -- features ---------------------------------------------------------------------


def _extract_one(job):
    cfg, manifest, entry, source, out_dir = job
    path = entry.clean_audio_path if source == "clean" else entry.multichannel_audio_path
    if path is None:
        logger.warning("%s: no %s audio; skipped", entry.utterance_id, source)
        return None
    mel = mel_spectrogram(load_audio(manifest.resolve(path), cfg.frontend.sample_rate_hz), cfg.frontend)
    target = Path(out_dir) / f"{entry.utterance_id}.{source}.melt"
    write_melt(target, mel)
    return str(target)


def cmd_features_extract(cfg: PipelineConfig, args) -> dict:
    manifest = Manifest.read(_require(args.manifest))
    sources = ["clean", "multichannel"] if args.source == "both" else [args.source]
    out_dir = Path(args.out or os.environ.get(ENV_CACHE_DIR, "features"))
    if args.dry_run:
        return {"utterances": len(manifest), "sources": sources, "outputs": [str(out_dir)]}
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, manifest, e, s, str(out_dir)) for e in manifest.entries for s in sources]
    written = [p for p in _map(_extract_one, jobs, cfg.pipeline.jobs) if p]
    return {"written": len(written), "dir": str(out_dir)}


# -- train / evaluate ---------------------------------------------------------------


def _model_cfg(cfg: PipelineConfig, args):
    return cfg.model_config(args.mode, args.audio_fusion, args.channels)


def cmd_train(cfg: PipelineConfig, args) -> dict:
    manifest = Manifest.read(_require(args.manifest))
    if args.features:
        _require(args.features)
    model_cfg = _model_cfg(cfg, args)
    train_cfg = cfg.train_config()
    plan = {
        "model": model_cfg.to_dict(),
        "train": dataclasses.asdict(train_cfg),
        "outputs": [str(args.out)] + ([str(args.history)] if args.history else []),
    }
    if args.dry_run:
        return plan
    sets = {}
    for split in ("train", "val"):
        entries = manifest.split(split)
        if not entries:
            raise ValueError(f"manifest has an empty {split} split")
        sets[split] = build_examples(
            manifest, entries, model_cfg, train_cfg, cfg.frontend, cache_dir=args.features, keep_clips=train_cfg.augment
        )
    result = train(model_cfg, sets["train"], sets["val"], train_cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint.config["frontend"] = dataclasses.asdict(cfg.frontend)
    ckpt_io.save(args.out, result.checkpoint)
    if args.history:
        write_history(args.history, result.history)
    last = result.history[result.best_epoch - 1]
    return {"checkpoint": str(args.out), "epochs": len(result.history), "best_epoch": result.best_epoch, "val_acc": last["val_acc"]}


def _eval_setup(cfg: PipelineConfig, ck):
    train_cfg = cfg.train_config()
    saved = ck.config.get("train", {})
    return dataclasses.replace(
        train_cfg,
        audio_source=saved.get("audio_source", train_cfg.audio_source),
        reference_channel=saved.get("reference_channel", train_cfg.reference_channel),
    )


def cmd_evaluate(cfg: PipelineConfig, args) -> dict:
    ck = ckpt_io.load(_require(args.checkpoint))
    manifest = Manifest.read(_require(args.manifest))
    entries = manifest.split(args.split)
    if args.dry_run:
        return {"utterances": len(entries), "outputs": [str(p) for p in (args.report, args.confusion) if p]}
    if not entries:
        raise ValueError(f"manifest has an empty {args.split} split")
    model = model_from_checkpoint(ck)
    eval_cfg = _eval_setup(cfg, ck)
    if args.audio_source:
        eval_cfg = dataclasses.replace(eval_cfg, audio_source=args.audio_source)
    ex = build_examples(manifest, entries, model.cfg, eval_cfg, cfg.frontend, cache_dir=args.features)
    report = evaluate(model, ex, args.condition or args.split, cfg.pipeline.seed)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if args.confusion:
        write_confusion_csv(args.confusion, report)
    return {"accuracy": report.accuracy, "ci_low": report.ci_low, "ci_high": report.ci_high, "absent_classes": report.absent_classes}


def _parse_checkpoints(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError("--checkpoint", f"expected MODE=PATH, got {item!r}")
        mode, path = item.split("=", 1)
        if mode not in BENCHMARK_MODES:
            raise ConfigError("--checkpoint", f"unknown mode {mode!r}; choose from {list(BENCHMARK_MODES)}")
        out[mode] = path
    return out


def cmd_benchmark(cfg: PipelineConfig, args) -> dict:
    _require(args.rooms)
    manifest = Manifest.read(_require(args.manifest))
    paths = _parse_checkpoints(args.checkpoint)
    for p in paths.values():
        _require(p)
    modes = list(BENCHMARK_MODES) if args.modes == "all" else [m.strip() for m in args.modes.split(",")]
    unknown = [m for m in modes if m not in BENCHMARK_MODES]
    if unknown:
        raise ConfigError("--modes", f"unknown modes {unknown}")
    if args.dry_run:
        return {"modes": modes, "checkpoints": paths, "outputs": [str(p) for p in (args.json, args.csv) if p]}
    rirsets = ingest_external_rirs(args.rooms, cfg.frontend.sample_rate_hz)
    if not rirsets:
        raise MissingInput(f"{args.rooms}/*.wav")
    models = {m: model_from_checkpoint(ckpt_io.load(p)) for m, p in paths.items()}
    reports = benchmark_rooms(
        models, manifest, rirsets, modes, cfg.frontend, args.snr_db, cfg.pipeline.seed, cfg.train.reference_channel
    )
    write_reports(args.json, args.csv, reports)
    return {"reports": len(reports), "csv": args.csv, "json": args.json}


def cmd_export_embeddings(cfg: PipelineConfig, args) -> dict:
    ck = ckpt_io.load(_require(args.checkpoint))
    manifest = Manifest.read(_require(args.manifest))
    entries = manifest.split(args.split)
    if args.dry_run:
        return {"utterances": len(entries), "kind": args.kind, "outputs": [str(args.out)]}
    if not entries:
        raise ValueError(f"manifest has an empty {args.split} split")
    model = model_from_checkpoint(ck)
    ex = build_examples(manifest, entries, model.cfg, _eval_setup(cfg, ck), cfg.frontend, cache_dir=args.features)
    emb = export_embeddings(model, ex, args.out, args.kind)
    return {"rows": int(emb.shape[0]), "dim": int(emb.shape[1]), "csv": str(args.out)}


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI file with one section per module")
    g.add_argument("--preset", choices=sorted(PRESETS), default=argparse.SUPPRESS, help="base settings (default: full)")
    g.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE", help="override one config value")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (overrides pipeline.seed)")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers for simulation/synthesis/features")
    g.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS, help="validate and print the plan without writing")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mmer", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, parent=sub):
        p = parent.add_parser(name, help=help_, parents=[common])
        p.set_defaults(fn=fn)
        return p

    rir = sub.add_parser("rir", help="room impulse responses").add_subparsers(dest="action", required=True)
    p = add("simulate", cmd_rir_simulate, "simulate rooms and write RIR WAV + JSON sidecars", rir)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=7, help="rooms per T60 value")
    p.add_argument("--t60", help="comma-separated T60 values in seconds (default: sampled)")

    ds = sub.add_parser("dataset", help="corpus construction").add_subparsers(dest="action", required=True)
    p = add("synthesize", cmd_dataset_synthesize, "reverberate and mix every clean utterance", ds)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mics", type=int, help="microphones per room (default: acoustics.mic_count)")
    p = add("toy", cmd_dataset_toy, "write the 4-class complementary-modality toy corpus", ds)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int)
    p = add("ravdess", cmd_dataset_ravdess, "build a manifest from RAVDESS-named files", ds)
    p.add_argument("--audio", required=True)
    p.add_argument("--video")
    p.add_argument("--out", required=True, help="manifest path")

    feats = sub.add_parser("features", help="feature cache").add_subparsers(dest="action", required=True)
    p = add("extract", cmd_features_extract, "write log-mel MELT files", feats)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help=f"cache directory (default: ${ENV_CACHE_DIR} or ./features)")
    p.add_argument("--source", choices=["clean", "multichannel", "both"], default="both")

    def model_args(p):
        p.add_argument("--mode", choices=["multimodal", "audio_only", "video_only"])
        p.add_argument("--audio-fusion", choices=["single", "avg_mel", "sum_pe"])
        p.add_argument("--channels", type=int, help="microphones seen by sum_pe")

    p = add("train", cmd_train, "train a model and save the best checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.emck)")
    p.add_argument("--features", help="MELT cache directory")
    p.add_argument("--history", help="per-epoch CSV")
    model_args(p)

    p = add("evaluate", cmd_evaluate, "accuracy, 75%% CI and confusion on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--condition")
    p.add_argument("--features")
    p.add_argument("--audio-source", choices=["clean", "multichannel"])
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--confusion", help="confusion CSV path")

    p = add("benchmark", cmd_benchmark, "per-room evaluation over external RIRs")
    p.add_argument("--rooms", required=True, help="directory of RIR WAVs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", metavar="MODE=PATH", help=f"one per mode: {', '.join(BENCHMARK_MODES)}")
    p.add_argument("--modes", default="all", help="'all' or comma-separated modes")
    p.add_argument("--snr-db", type=float, help="add noise at this SNR after reverberation")
    p.add_argument("--json")
    p.add_argument("--csv")

    p = add("export-embeddings", cmd_export_embeddings, "write per-utterance embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--kind", choices=["audio", "video", "fused"], default="fused")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    return parser


def _error(exc: BaseException) -> dict:
    out = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        out["key"] = exc.key
    if isinstance(exc, MissingInput):
        out["path"] = exc.path
    elif isinstance(exc, FileNotFoundError) and exc.filename:
        out["path"] = str(exc.filename)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("preset", "full"), ("set", []), ("dry_run", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "seed", None) is not None:
            overrides.append(f"pipeline.seed={args.seed}")
        if getattr(args, "jobs", None) is not None:
            overrides.append(f"pipeline.jobs={args.jobs}")
        if args.config:
            _require(args.config)
        cfg = load_config(args.config, args.preset, overrides)
        logger.info("resolved config: %s", dumps(cfg))
        for attr in ("out", "history", "report", "confusion", "json", "csv"):
            if getattr(args, attr, None):
                setattr(args, attr, str(_out(getattr(args, attr))))
        result = args.fn(cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        logger.debug("command failed", exc_info=True)
        print(json.dumps(_error(exc)), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    if args.dry_run:
        result = {"dry_run": True, "command": args.command, "config": cfg.to_dict(), "plan": result}
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
