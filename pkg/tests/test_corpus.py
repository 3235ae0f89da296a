import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmer.acoustics import RirSet, sample_room
from mmer.corpus import (
    EMOTIONS,
    Manifest,
    ManifestEntry,
    ToyCorpusConfig,
    VideoClip,
    build_split,
    generate_toy_corpus,
    ingest_external_rirs,
    label_index,
    label_name,
    manifest_from_ravdess,
    parse_ravdess_name,
    read_clip,
    toy_frames,
    write_clip,
    write_rirset,
)
from mmer.wavio import write_wav


def test_label_bijection():
    assert EMOTIONS[0] == "neutral" and EMOTIONS[7] == "surprised" and len(EMOTIONS) == 8
    for i in range(8):
        assert label_index(label_name(i)) == i
    with pytest.raises(ValueError):
        label_index("bored")


def test_split_sizes():
    counts = lambda m: tuple(sum(v == s for v in m.values()) for s in ("train", "val", "test"))
    assert counts(build_split(range(1, 25))) == (19, 2, 3)
    assert counts(build_split(range(10))) == (8, 1, 1)
    assert build_split(range(24), rng_seed=5) == build_split(range(24), rng_seed=5)


def test_split_errors():
    with pytest.raises(ValueError):
        build_split([1, 2])
    with pytest.raises(ValueError):
        build_split(range(10), (0.5, 0.2, 0.2))
    with pytest.raises(ValueError, match="empty"):
        build_split(range(3), (0.98, 0.01, 0.01))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(3, 40))
def test_actor_exclusivity(seed, n_actors):
    entries = [
        ManifestEntry(f"u{i}", 1 + i % n_actors, i % 8, f"a/{i}.wav") for i in range(3 * n_actors)
    ]
    try:
        m = Manifest(entries)
        from mmer.corpus import assign_splits

        assign_splits(m, rng_seed=seed)
    except ValueError:
        return  # a split would be empty for this actor count
    m.validate(check_paths=False)
    per_actor = {}
    for e in m.entries:
        per_actor.setdefault(e.actor_id, set()).add(e.split)
    assert all(len(s) == 1 for s in per_actor.values())


def test_manifest_round_trip_is_byte_identical(tmp_path):
    entries = [
        ManifestEntry("u1", 1, 3, "a/1.wav", "m/1.wav", "v/1.pclp", "sim:seed=5", "test"),
        ManifestEntry("ü2", 2, 0, "a/2.wav"),
    ]
    Manifest(entries).write(tmp_path / "a.jsonl")
    m = Manifest.read(tmp_path / "a.jsonl")
    assert m.entries == entries
    m.write(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_manifest_validation(tmp_path):
    m = Manifest([ManifestEntry("u", 1, 9, "missing.wav", split="dev")], tmp_path)
    with pytest.raises(ValueError) as err:
        m.validate()
    msg = str(err.value)
    assert "label 9" in msg and "unknown split" in msg and "does not exist" in msg
    (tmp_path / "bad.jsonl").write_text('{"utterance_id": "x"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        Manifest.read(tmp_path / "bad.jsonl")


def test_pclp_round_trip(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, size=(9, 5, 7, 3), dtype=np.uint8)
    write_clip(tmp_path / "a.pclp", VideoClip(frames))
    clip = read_clip(tmp_path / "a.pclp")
    assert np.array_equal(clip.frames, frames)
    write_clip(tmp_path / "b.pclp", clip)
    assert (tmp_path / "a.pclp").read_bytes() == (tmp_path / "b.pclp").read_bytes()
    raw = (tmp_path / "a.pclp").read_bytes()
    assert raw[:4] == b"PCLP" and raw[4:20] == np.array([1, 9, 5, 7], "<u4").tobytes()
    (tmp_path / "c.pclp").write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="size"):
        read_clip(tmp_path / "c.pclp")


def test_parse_ravdess_name():
    info = parse_ravdess_name("03-01-06-01-02-01-12.wav")
    assert info["label"] == 5 and EMOTIONS[info["label"]] == "fearful"
    assert info["actor_id"] == 12 and info["utterance_id"] == "06-01-02-01-12"
    with pytest.raises(ValueError):
        parse_ravdess_name("hello.wav")


def test_manifest_from_ravdess(tmp_path):
    audio, video = tmp_path / "audio", tmp_path / "video"
    audio.mkdir()
    video.mkdir()
    for actor in range(1, 11):
        for emo in (1, 5):
            stem = f"03-01-{emo:02d}-01-01-01-{actor:02d}"
            write_wav(audio / f"{stem}.wav", np.zeros(100), 16000, "pcm16")
            write_clip(video / f"01-01-{emo:02d}-01-01-01-{actor:02d}.pclp", VideoClip(np.zeros((8, 2, 2, 3), np.uint8)))
    (audio / "notes.wav").write_bytes(b"")
    m = manifest_from_ravdess(audio, video)
    assert len(m) == 20
    assert all(e.video_clip_path for e in m.entries)
    m.validate()


def test_toy_corpus(tmp_path):
    m = generate_toy_corpus(tmp_path, n_per_class=8, rng_seed=1)
    labels = [e.label for e in m.entries]
    assert [labels.count(k) for k in range(4)] == [8, 8, 8, 8]
    m.validate()
    assert Manifest.read(tmp_path / "manifest.jsonl").entries == m.entries
    clip = read_clip(m.resolve(m.entries[0].video_clip_path))
    assert len(clip) >= 8
    with pytest.raises(ValueError):
        generate_toy_corpus(tmp_path / "x", n_per_class=3)


def test_toy_video_direction():
    cfg = ToyCorpusConfig(noise=False)
    for bit in (0, 1):
        frames = toy_frames(bit, np.random.default_rng(2), cfg).astype(float).sum(axis=(1, 3))
        cols = np.arange(frames.shape[1])
        centroid = [(f - f.min()) @ cols / (f - f.min()).sum() for f in frames]
        assert (np.diff(centroid) > 0).all() if bit else (np.diff(centroid) < 0).all()


def test_toy_modalities_are_complementary(tmp_path):
    m = generate_toy_corpus(tmp_path, n_per_class=4, rng_seed=0)
    # label = 2*audio_bit + video_bit
    pairs = {(e.label // 2, e.label % 2) for e in m.entries}
    assert pairs == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_rir_ingest(tmp_path, caplog):
    room = sample_room(0, 3)
    write_rirset(tmp_path / "roomA.wav", RirSet(16000, np.random.default_rng(0).standard_normal((3, 50)) * 0.1, room=room))
    write_wav(tmp_path / "mono.wav", np.ones(20) * 0.5, 8000, "float32")
    (tmp_path / "mono.json").write_text(json.dumps({"t60_s": 0.638}))
    (tmp_path / "broken.wav").write_bytes(b"nope")
    with caplog.at_level(logging.ERROR):
        sets = ingest_external_rirs(tmp_path)
    assert [s.name for s in sets] == ["mono", "roomA"]
    assert "broken.wav" in caplog.text
    mono, room_a = sets
    assert mono.channel_count == 1 and mono.rirs.shape[1] == 40 and mono.meta["t60_s"] == 0.638
    assert room_a.channel_count == 3 and room_a.room == room


def test_rir_ingest_empty(tmp_path, caplog):
    assert ingest_external_rirs(tmp_path) == []
    assert "no RIR files" in caplog.text
