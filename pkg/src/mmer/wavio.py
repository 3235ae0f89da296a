"""Minimal RIFF/WAVE reader and writer (PCM16, PCM24, IEEE float32)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_PCM = 1
FORMAT_FLOAT = 3
FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file.

    Returns:
        ``(samples, sample_rate)`` with samples as float64 of shape
        ``(channels, n_frames)`` scaled to [-1, 1) for integer formats.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == FORMAT_EXTENSIBLE and len(body) >= 26:
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise WavError(f"{path}: zero channels")
    n_frames = len(payload) // block_align
    payload = payload[: n_frames * block_align]
    if tag == FORMAT_FLOAT and bits == 32:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif tag == FORMAT_FLOAT and bits == 64:
        x = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    elif tag == FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload, dtype="<i2") / 32768.0
    elif tag == FORMAT_PCM and bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v / float(1 << 23)
    elif tag == FORMAT_PCM and bits == 32:
        x = np.frombuffer(payload, dtype="<i4") / float(1 << 31)
    else:
        raise WavError(f"{path}: unsupported format tag={tag} bits={bits}")
    return x.reshape(n_frames, channels).T.copy(), rate


def write_wav(path, samples: np.ndarray, sample_rate: int, subtype: str = "float32") -> None:
    """Write ``samples`` of shape (channels, n) or (n,) as a WAV file.

    ``subtype`` is one of ``"float32"``, ``"pcm16"``, ``"pcm24"``. Integer
    subtypes clip to [-1, 1).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    channels, n = x.shape
    inter = x.T
    if subtype == "float32":
        tag, bits = FORMAT_FLOAT, 32
        payload = inter.astype("<f4").tobytes()
    elif subtype == "pcm16":
        tag, bits = FORMAT_PCM, 16
        payload = np.clip(np.round(inter * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif subtype == "pcm24":
        tag, bits = FORMAT_PCM, 24
        v = np.clip(np.round(inter * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype("<i4")
        payload = np.ascontiguousarray(v).view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block_align, block_align, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
