"""Binary file interfaces: PCM WAV, the AMSPEC1 spectrogram container, and
the AMCKPT1 model checkpoint.

AMSPEC1: magic "AMSPEC1", little-endian u32 T, u32 F, u8 scale tag
(0 = linear magnitude, 1 = log mel), then T*F little-endian f32 values
row-major by time.

AMCKPT1: magic "AMCKPT1", u32 version, u32 header length, JSON header
(architecture hyperparameters, named parameter manifest with shapes,
optimizer scalars), then f32 parameter blobs in manifest order, then the
Adam m and v blobs when optimizer state is present.
"""

from __future__ import annotations

import json
import struct
import wave
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from audiomorph.autodiff import Tensor
from audiomorph.dsp import SCALE_LINEAR, SCALE_LOG_MEL, Spectrogram, Waveform
from audiomorph.errors import FormatError, InvalidInputError

_SPEC_MAGIC = b"AMSPEC1"
_CKPT_MAGIC = b"AMCKPT1"
_CKPT_VERSION = 1

_SCALE_TAGS = {SCALE_LINEAR: 0, SCALE_LOG_MEL: 1}
_TAG_SCALES = {v: k for k, v in _SCALE_TAGS.items()}


# ---------------------------------------------------------------------------
# WAV (16-bit signed little-endian PCM, mono)
# ---------------------------------------------------------------------------

def read_wav(path, expected_rate_hz: Optional[int] = 16000) -> Waveform:
    """Read a mono 16-bit PCM WAV; rejects other layouts and, unless
    expected_rate_hz is None, any other sample rate (no resampling here)."""
    with wave.open(str(path), "rb") as handle:
        channels = handle.getnchannels()
        width = handle.getsampwidth()
        rate = handle.getframerate()
        n_frames = handle.getnframes()
        raw = handle.readframes(n_frames)
    if channels != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise InvalidInputError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate_hz is not None and rate != expected_rate_hz:
        raise InvalidInputError(
            f"{path}: sample rate is {rate} Hz but {expected_rate_hz} Hz is "
            "required (resampling is out of scope)"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform) -> None:
    """Write mono 16-bit PCM; samples are clipped to [-1, 1]."""
    clipped = np.clip(wav.samples, -1.0, 1.0)
    pcm = (clipped * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(wav.sample_rate_hz)
        handle.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# AMSPEC1 spectrogram container
# ---------------------------------------------------------------------------

def write_amspec(path, spec: Spectrogram) -> None:
    frames = np.ascontiguousarray(spec.frames, dtype="<f4")
    n_frames, n_bins = frames.shape
    with open(path, "wb") as handle:
        handle.write(_SPEC_MAGIC)
        handle.write(struct.pack("<IIB", n_frames, n_bins, _SCALE_TAGS[spec.scale]))
        handle.write(frames.tobytes())


def read_amspec(path) -> Spectrogram:
    """Read an AMSPEC1 container.  The analysis config is not stored in the
    container, so the returned Spectrogram has config=None."""
    with open(path, "rb") as handle:
        magic = handle.read(len(_SPEC_MAGIC))
        if magic != _SPEC_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected AMSPEC1")
        header = handle.read(9)
        if len(header) != 9:
            raise FormatError(f"{path}: truncated AMSPEC1 header")
        n_frames, n_bins, tag = struct.unpack("<IIB", header)
        if tag not in _TAG_SCALES:
            raise FormatError(f"{path}: unknown scale tag {tag}")
        payload = handle.read(4 * n_frames * n_bins)
    if len(payload) != 4 * n_frames * n_bins:
        raise FormatError(f"{path}: truncated AMSPEC1 payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_bins)
    return Spectrogram(frames.copy(), _TAG_SCALES[tag], config=None)


# ---------------------------------------------------------------------------
# AMCKPT1 checkpoint
# ---------------------------------------------------------------------------

def _param_array(value) -> np.ndarray:
    # accepts autodiff Tensors (have .requires_grad) or plain ndarrays
    return np.asarray(value.data if hasattr(value, "requires_grad") else value)


def save_checkpoint(path, arch: dict, params: "OrderedDict[str, Tensor]",
                    optimizer_state: Optional[dict] = None,
                    optimizer_moments: Optional[Tuple[list, list]] = None,
                    extra: Optional[dict] = None) -> None:
    """Serialize named parameters plus optional Adam state.

    arch holds the architecture/feature hyperparameters needed to rebuild the
    model; extra is free-form harness state (e.g. epochs completed).  Values
    may be autodiff tensors or bare arrays; storage is float32 either way.
    """
    manifest = [{"name": name, "shape": list(_param_array(t).shape)}
                for name, t in params.items()]
    header = {
        "arch": arch,
        "params": manifest,
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as handle:
        handle.write(_CKPT_MAGIC)
        handle.write(struct.pack("<II", _CKPT_VERSION, len(header_bytes)))
        handle.write(header_bytes)
        for tensor in params.values():
            handle.write(np.ascontiguousarray(_param_array(tensor),
                                              dtype="<f4").tobytes())
        if optimizer_state is not None:
            if optimizer_moments is None:
                raise InvalidInputError("optimizer state given without m/v moments")
            m_list, v_list = optimizer_moments
            for blob in list(m_list) + list(v_list):
                handle.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Read an AMCKPT1 file.

    Returns {"arch", "params" (OrderedDict name -> float32 ndarray),
    "optimizer" (scalars or None), "moments" ((m, v) lists or None),
    "extra"}.
    """
    with open(path, "rb") as handle:
        magic = handle.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected AMCKPT1")
        meta = handle.read(8)
        if len(meta) != 8:
            raise FormatError(f"{path}: truncated AMCKPT1 header")
        version, header_len = struct.unpack("<II", meta)
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(handle.read(header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None

        def read_blob(shape):
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatError(f"{path}: truncated parameter blob")
            return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

        params = OrderedDict()
        for entry in header["params"]:
            params[entry["name"]] = read_blob(entry["shape"])
        moments = None
        if header.get("optimizer") is not None:
            shapes = [entry["shape"] for entry in header["params"]]
            m_list = [read_blob(s) for s in shapes]
            v_list = [read_blob(s) for s in shapes]
            moments = (m_list, v_list)
    return {
        "arch": header["arch"],
        "params": params,
        "optimizer": header.get("optimizer"),
        "moments": moments,
        "extra": header.get("extra", {}),
    }
