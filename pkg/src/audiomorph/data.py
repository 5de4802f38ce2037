"""Synthetic timbre-transfer corpus and the feature pipeline.

Clips are additively synthesized harmonic tones: each style fixes a harmonic
amplitude profile (sine / sawtooth / square / triangle) shaped by Gaussian
formant gains, and each content id is a MIDI pitch.  Every style renders
every pitch, so any two styles of the same pitch form a supervised transfer
pair with aligned content.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from audiomorph import formats
from audiomorph.dsp import (
    LOG_FLOOR,
    SCALE_LOG_MEL,
    MelFilterbank,
    Spectrogram,
    StftConfig,
    Waveform,
    mel_filterbank,
    normalize_peak,
    preemphasize,
    stft_magnitude,
    to_log_mel,
)
from audiomorph.errors import InvalidInputError

log = logging.getLogger("audiomorph.data")

WAVEFORM_KINDS = ("sine", "sawtooth", "square", "triangle")


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


@dataclass(frozen=True)
class StyleSpec:
    """One synthetic instrument: a harmonic profile plus formant gains.

    Each formant is (center_hz, width_hz, gain); harmonic amplitudes are
    multiplied by 1 + gain * exp(-((f - center) / width)^2).
    """

    name: str
    waveform: str = "sawtooth"
    formants: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.waveform not in WAVEFORM_KINDS:
            raise InvalidInputError(
                f"waveform must be one of {WAVEFORM_KINDS}, got {self.waveform!r}"
            )

    def to_dict(self) -> dict:
        return {"name": self.name, "waveform": self.waveform,
                "formants": [list(f) for f in self.formants]}

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        return cls(name=d["name"], waveform=d["waveform"],
                   formants=tuple(tuple(f) for f in d.get("formants", ())))


DEFAULT_STYLES: Tuple[StyleSpec, ...] = (
    StyleSpec("flute", "sine"),
    StyleSpec("brass", "sawtooth", ((1200.0, 400.0, 3.0),)),
    StyleSpec("reed", "square", ((2400.0, 700.0, 2.5),)),
    StyleSpec("pad", "triangle", ((600.0, 300.0, 1.5),)),
)


@dataclass(frozen=True)
class SynthConfig:
    """Corpus layout: which styles, which pitches, clip shape."""

    styles: Tuple[StyleSpec, ...] = DEFAULT_STYLES
    n_pitches: int = 24
    midi_low: int = 48
    holdout_pitches: int = 4
    duration_s: float = 0.5
    sample_rate_hz: int = 16000
    amplitude: float = 0.35
    attack_s: float = 0.02
    release_s: float = 0.05
    noise_level: float = 1e-4

    def __post_init__(self):
        if self.n_pitches < 1:
            raise InvalidInputError("n_pitches must be >= 1")
        if not 0 <= self.holdout_pitches < self.n_pitches:
            raise InvalidInputError(
                f"holdout_pitches must be in [0, {self.n_pitches}), "
                f"got {self.holdout_pitches}"
            )
        if len({s.name for s in self.styles}) != len(self.styles):
            raise InvalidInputError("style names must be unique")

    @property
    def pitches(self) -> List[int]:
        return [self.midi_low + i for i in range(self.n_pitches)]

    def test_pitches(self) -> List[int]:
        """Held-out pitches, spaced evenly through the interior of the range
        so the model interpolates rather than extrapolates."""
        if self.holdout_pitches == 0:
            return []
        step = self.n_pitches // self.holdout_pitches
        start = step // 2
        picked = [self.pitches[start + i * step] for i in range(self.holdout_pitches)]
        return picked

    def to_dict(self) -> dict:
        return {
            "styles": [s.to_dict() for s in self.styles],
            "n_pitches": self.n_pitches,
            "midi_low": self.midi_low,
            "holdout_pitches": self.holdout_pitches,
            "duration_s": self.duration_s,
            "sample_rate_hz": self.sample_rate_hz,
            "amplitude": self.amplitude,
            "attack_s": self.attack_s,
            "release_s": self.release_s,
            "noise_level": self.noise_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["styles"] = tuple(StyleSpec.from_dict(s) for s in d["styles"])
        return cls(**d)


def _harmonic_amplitudes(waveform: str, n_harmonics: int) -> np.ndarray:
    """Ideal-waveform harmonic series, truncated below Nyquist (alias-free)."""
    h = np.arange(1, n_harmonics + 1, dtype=np.float64)
    if waveform == "sine":
        amps = np.zeros(n_harmonics)
        amps[0] = 1.0
        return amps
    if waveform == "sawtooth":
        return 1.0 / h
    if waveform == "square":
        return np.where(h % 2 == 1, 1.0 / h, 0.0)
    # triangle: odd harmonics, 1/h^2, alternating sign
    signs = np.where((h % 4) == 1, 1.0, -1.0)
    return np.where(h % 2 == 1, signs / h**2, 0.0)


def _formant_gain(freqs_hz: np.ndarray, style: StyleSpec) -> np.ndarray:
    gain = np.ones_like(freqs_hz)
    for center, width, amount in style.formants:
        gain += amount * np.exp(-(((freqs_hz - center) / width) ** 2))
    return gain


def render_clip(style: StyleSpec, midi_pitch: int, cfg: SynthConfig,
                rng: np.random.Generator) -> Waveform:
    """Additively synthesize one tone: harmonics below Nyquist, formant
    shaping, linear attack/release envelope, and a low noise floor."""
    sr = cfg.sample_rate_hz
    f0 = midi_to_hz(midi_pitch)
    n_samples = int(round(cfg.duration_s * sr))
    t = np.arange(n_samples) / sr

    n_harmonics = max(1, int(0.95 * (sr / 2) / f0))
    amps = _harmonic_amplitudes(style.waveform, n_harmonics)
    freqs = f0 * np.arange(1, n_harmonics + 1)
    amps = amps * _formant_gain(freqs, style)

    x = np.zeros(n_samples)
    for amp, f in zip(amps, freqs):
        if amp != 0.0:
            x += amp * np.sin(2 * np.pi * f * t)

    attack = max(1, int(cfg.attack_s * sr))
    release = max(1, int(cfg.release_s * sr))
    env = np.ones(n_samples)
    env[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
    env[-release:] *= np.linspace(1.0, 0.0, release)
    x *= env

    peak = np.max(np.abs(x))
    if peak > 0:
        x *= cfg.amplitude / peak
    x += cfg.noise_level * rng.standard_normal(n_samples)
    return Waveform(x, sr)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    """One corpus clip: where it lives and what it contains."""

    clip_id: str
    path: str  # relative to the manifest's directory
    style_id: int
    style_name: str
    midi_pitch: int
    content_id: str
    split: str  # "train" | "test"
    sample_rate_hz: int
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "path": self.path,
            "style_id": self.style_id,
            "style_name": self.style_name,
            "midi_pitch": self.midi_pitch,
            "content_id": self.content_id,
            "split": self.split,
            "sample_rate_hz": self.sample_rate_hz,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(**d)


def synth_dataset(out_dir, cfg: SynthConfig = SynthConfig(),
                  seed: int = 7) -> List[ManifestEntry]:
    """Render the full corpus under out_dir.

    Writes one WAV per (style, pitch), a manifest.jsonl, and the synthesis
    config.  Per-clip noise is seeded by (seed, style_id, pitch) so any clip
    is reproducible in isolation.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    test_pitches = set(cfg.test_pitches())
    entries: List[ManifestEntry] = []
    for style_id, style in enumerate(cfg.styles):
        for pitch in cfg.pitches:
            rng = np.random.default_rng([seed, style_id, pitch])
            wav = render_clip(style, pitch, cfg, rng)
            clip_id = f"{style.name}_p{pitch:03d}"
            rel_path = f"wav/{clip_id}.wav"
            formats.write_wav(out_dir / rel_path, wav)
            entries.append(ManifestEntry(
                clip_id=clip_id,
                path=rel_path,
                style_id=style_id,
                style_name=style.name,
                midi_pitch=pitch,
                content_id=f"p{pitch:03d}",
                split="test" if pitch in test_pitches else "train",
                sample_rate_hz=cfg.sample_rate_hz,
                n_samples=len(wav.samples),
            ))
    write_manifest(out_dir / "manifest.jsonl", entries)
    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


def load_manifest(path) -> List[ManifestEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise InvalidInputError(f"manifest not found: {path}")
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise InvalidInputError(
                    f"bad manifest line {line_no} in {path}: {exc}") from exc
    return entries


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    """Waveform-to-log-mel pipeline settings."""

    sample_rate_hz: int = 16000
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 80
    f_min_hz: float = 0.0
    f_max_hz: Optional[float] = None

    def filterbank(self) -> MelFilterbank:
        return mel_filterbank(
            n_mels=self.n_mels,
            fft_size=self.stft.fft_size,
            sample_rate_hz=self.sample_rate_hz,
            f_min=self.f_min_hz,
            f_max=self.f_max_hz,
        )

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "stft": self.stft.to_dict(),
            "n_mels": self.n_mels,
            "f_min_hz": self.f_min_hz,
            "f_max_hz": self.f_max_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        d["stft"] = StftConfig.from_dict(d["stft"])
        return cls(**d)


def featurize(wav: Waveform, fc: FeatureConfig,
              fb: Optional[MelFilterbank] = None) -> Spectrogram:
    """Peak-normalize, pre-emphasize, STFT, log-mel; float32 output.

    The float32 cast happens here (not in the cache layer) so cached and
    freshly computed features are bit-identical.
    """
    if wav.sample_rate_hz != fc.sample_rate_hz:
        raise InvalidInputError(
            f"waveform rate {wav.sample_rate_hz} != feature config rate "
            f"{fc.sample_rate_hz}"
        )
    if fb is None:
        fb = fc.filterbank()
    wav = normalize_peak(wav)
    wav = preemphasize(wav, fc.stft.preemphasis)
    mag = stft_magnitude(wav, fc.stft)
    logmel = to_log_mel(mag, fb)
    return Spectrogram(logmel.frames.astype(np.float32), SCALE_LOG_MEL, fc.stft)


def default_cache_dir() -> Optional[Path]:
    env = os.environ.get("AUDIOMORPH_CACHE")
    return Path(env) if env else None


def _cache_key(wav_bytes: bytes, fc: FeatureConfig) -> str:
    h = hashlib.sha256()
    h.update(wav_bytes)
    h.update(json.dumps(fc.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:32]


def features_for_file(wav_path, fc: FeatureConfig,
                      fb: Optional[MelFilterbank] = None,
                      cache_dir=None) -> Spectrogram:
    """Featurize one WAV, going through the content-addressed cache when a
    cache directory is configured (argument or AUDIOMORPH_CACHE)."""
    wav_path = Path(wav_path)
    if cache_dir is None:
        cache_dir = default_cache_dir()
    if cache_dir is None:
        return featurize(formats.read_wav(wav_path, fc.sample_rate_hz), fc, fb)

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _cache_key(wav_path.read_bytes(), fc)
    cache_path = cache_dir / f"{key}.amspec"
    if cache_path.exists():
        spec = formats.read_amspec(cache_path)
        return Spectrogram(spec.frames, spec.scale, fc.stft)
    spec = featurize(formats.read_wav(wav_path, fc.sample_rate_hz), fc, fb)
    tmp = cache_path.with_suffix(".tmp")
    formats.write_amspec(tmp, spec)
    os.replace(tmp, cache_path)
    return spec


@dataclass
class ClipFeatures:
    """A manifest entry together with its log-mel frames."""

    entry: ManifestEntry
    frames: np.ndarray  # (T, n_mels) float32


def load_features(manifest_path, fc: FeatureConfig, split: Optional[str] = None,
                  cache_dir=None) -> List[ClipFeatures]:
    """Featurize every manifest clip (optionally one split), in manifest
    order."""
    manifest_path = Path(manifest_path)
    root = manifest_path if manifest_path.is_dir() else manifest_path.parent
    entries = load_manifest(manifest_path)
    if split is not None:
        entries = [e for e in entries if e.split == split]
    fb = fc.filterbank()
    out = []
    for entry in entries:
        spec = features_for_file(root / entry.path, fc, fb, cache_dir)
        out.append(ClipFeatures(entry, spec.frames))
    return out


# ---------------------------------------------------------------------------
# pairing and batching
# ---------------------------------------------------------------------------

@dataclass
class TransferPair:
    """Source clip to be re-rendered in the target clip's style."""

    src: ClipFeatures
    tgt: ClipFeatures


def build_pairs(clips: Sequence[ClipFeatures],
                include_identity: bool = False) -> List[TransferPair]:
    """All ordered cross-style pairs sharing a content id.

    Contents seen in only one style cannot form a transfer pair and are
    skipped with a warning.  include_identity adds (clip, clip) pairs, which
    stabilize early training.
    """
    by_content: Dict[str, List[ClipFeatures]] = {}
    for clip in clips:
        by_content.setdefault(clip.entry.content_id, []).append(clip)
    pairs: List[TransferPair] = []
    for content_id in sorted(by_content):
        group = by_content[content_id]
        if len(group) < 2 and not include_identity:
            log.warning("content %s has a single style; no transfer pairs",
                        content_id)
            continue
        for src in group:
            for tgt in group:
                if src is tgt and not include_identity:
                    continue
                pairs.append(TransferPair(src, tgt))
    return pairs


def identity_pairs(clips: Sequence[ClipFeatures]) -> List[TransferPair]:
    return [TransferPair(c, c) for c in clips]


def _pad_stack(frame_list: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (T, M) arrays; pad with silence and return the
    validity mask."""
    n = len(frame_list)
    t_max = max(f.shape[0] for f in frame_list)
    n_mels = frame_list[0].shape[1]
    out = np.full((n, t_max, n_mels), np.log(LOG_FLOOR), dtype=np.float32)
    mask = np.zeros((n, t_max), dtype=np.float32)
    for i, f in enumerate(frame_list):
        out[i, : len(f)] = f
        mask[i, : len(f)] = 1.0
    return out, mask


def make_batch(pairs: Sequence[TransferPair]) -> dict:
    """Pad a list of pairs into the dict consumed by the training loss."""
    if not pairs:
        raise InvalidInputError("empty batch")
    src, src_mask = _pad_stack([p.src.frames for p in pairs])
    tgt, tgt_mask = _pad_stack([p.tgt.frames for p in pairs])
    return {
        "src": src,
        "src_mask": src_mask,
        "src_styles": np.array([p.src.entry.style_id for p in pairs], dtype=np.int64),
        "tgt": tgt,
        "tgt_mask": tgt_mask,
        "tgt_styles": np.array([p.tgt.entry.style_id for p in pairs], dtype=np.int64),
        "pair_ids": [(p.src.entry.clip_id, p.tgt.entry.clip_id) for p in pairs],
    }


def batch_iterator(pairs: Sequence[TransferPair], batch_size: int, seed: int,
                   epoch: int) -> Iterator[dict]:
    """Shuffled minibatches; the shuffle is keyed by (seed, epoch) so resumed
    runs see identical order.  The final short batch is kept."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        yield make_batch(chunk)


def _roll_mel(frames: np.ndarray, shift: int) -> np.ndarray:
    """Shift a (T, M) log-mel array along the mel axis, filling vacated bins
    with the silence floor."""
    if shift == 0:
        return frames
    out = np.full_like(frames, np.log(LOG_FLOOR))
    if shift > 0:
        out[:, shift:] = frames[:, :-shift]
    else:
        out[:, :shift] = frames[:, -shift:]
    return out


def mel_jitter_batch(batch: dict, max_shift: int,
                     rng: np.random.Generator) -> dict:
    """Pitch-like augmentation: roll each example's source and target frames
    by the same random offset in [-max_shift, max_shift] mel bins.

    Harmonic combs land at bin positions absent from a small corpus, which
    stops the decoder from memorizing per-pitch templates and forces it to
    place energy where the encoder saw it.  Returns a new batch dict; the
    input arrays are not modified.
    """
    if max_shift < 0:
        raise InvalidInputError(f"max_shift must be >= 0, got {max_shift}")
    if max_shift == 0:
        return batch
    src = batch["src"].copy()
    tgt = batch["tgt"].copy()
    for i in range(src.shape[0]):
        shift = int(rng.integers(-max_shift, max_shift + 1))
        src[i] = _roll_mel(src[i], shift)
        tgt[i] = _roll_mel(tgt[i], shift)
    out = dict(batch)
    out["src"] = src
    out["tgt"] = tgt
    return out
