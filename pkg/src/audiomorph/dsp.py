"""Deterministic signal-processing kernels.

Pre-emphasis, no-padding STFT with a periodic Hann window, HTK-convention
mel filterbank, Griffin-Lim phase reconstruction, and the mel-cepstral
distortion metric.  All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from audiomorph.errors import InvalidInputError, ShapeError

DEFAULT_SAMPLE_RATE = 16000

# Floor applied to mel energies before the log, keeping losses finite.
LOG_FLOOR = 1e-5

SCALE_LINEAR = "linear_magnitude"
SCALE_LOG_MEL = "log_mel"

# 10 / ln(10), the cepstral-distortion dB constant.
_MCD_CONST = 10.0 / np.log(10.0)


@dataclass
class Waveform:
    """Mono sample sequence at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters: 50 ms Hann window, 12.5 ms hop, 2048-point FFT."""

    window_ms: float = 50.0
    hop_ms: float = 12.5
    fft_size: int = 2048
    preemphasis: float = 0.97

    def __post_init__(self):
        if not (0.0 <= self.preemphasis < 1.0):
            raise InvalidInputError(f"preemphasis must be in [0, 1), got {self.preemphasis}")
        if self.hop_ms > self.window_ms:
            raise InvalidInputError("hop_ms must not exceed window_ms")
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise InvalidInputError(f"fft_size must be a power of two, got {self.fft_size}")

    def window_length(self, sample_rate_hz: int) -> int:
        n = int(round(self.window_ms * sample_rate_hz / 1000.0))
        if n > self.fft_size:
            raise InvalidInputError(
                f"window of {n} samples exceeds fft_size {self.fft_size}"
            )
        return n

    def hop_length(self, sample_rate_hz: int) -> int:
        return max(1, int(round(self.hop_ms * sample_rate_hz / 1000.0)))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return {
            "window_ms": self.window_ms,
            "hop_ms": self.hop_ms,
            "fft_size": self.fft_size,
            "preemphasis": self.preemphasis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


@dataclass
class Spectrogram:
    """Time x frequency real matrix, linear-magnitude or log-mel."""

    frames: np.ndarray
    scale: str = SCALE_LINEAR
    config: Optional[StftConfig] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ShapeError(f"spectrogram frames must be 2-D, got {self.frames.shape}")
        if self.scale not in (SCALE_LINEAR, SCALE_LOG_MEL):
            raise InvalidInputError(f"unknown spectrogram scale {self.scale!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


@dataclass
class MelFilterbank:
    """Triangular filters on the mel scale; rows are filters over FFT bins."""

    weights: np.ndarray
    f_min_hz: float
    f_max_hz: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window w[k] = 0.5 (1 - cos(2 pi k / n))."""
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def frame_count(n_samples: int, win_length: int, hop_length: int) -> int:
    """Number of fully-inside analysis frames: 1 + floor((L - win) / hop)."""
    if n_samples < win_length:
        raise InvalidInputError(
            f"signal of {n_samples} samples is shorter than one "
            f"{win_length}-sample window"
        )
    return 1 + (n_samples - win_length) // hop_length


def preemphasize(wav: Waveform, coeff: float) -> Waveform:
    """First-order high-pass: y[0] = x[0], y[n] = x[n] - coeff * x[n-1]."""
    if not (0.0 <= coeff < 1.0):
        raise InvalidInputError(f"preemphasis coefficient must be in [0, 1), got {coeff}")
    x = wav.samples
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - coeff * x[:-1]
    return Waveform(y, wav.sample_rate_hz)


def deemphasize(wav: Waveform, coeff: float) -> Waveform:
    """Inverse of preemphasize: x[n] = y[n] + coeff * x[n-1]."""
    if not (0.0 <= coeff < 1.0):
        raise InvalidInputError(f"preemphasis coefficient must be in [0, 1), got {coeff}")
    x = lfilter([1.0], [1.0, -coeff], wav.samples)
    return Waveform(x, wav.sample_rate_hz)


def normalize_peak(wav: Waveform, peak: float = 1.0) -> Waveform:
    """Scale so the largest absolute sample equals peak; silence is returned as-is."""
    top = np.max(np.abs(wav.samples))
    if top == 0.0:
        return Waveform(wav.samples.copy(), wav.sample_rate_hz)
    return Waveform(wav.samples * (peak / top), wav.sample_rate_hz)


def _frame(samples: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    """(T, win) view of all fully-inside frames, no padding."""
    n = frame_count(len(samples), win_length, hop_length)
    windows = np.lib.stride_tricks.sliding_window_view(samples, win_length)
    return windows[:: hop_length][:n]


def _stft_complex(samples: np.ndarray, win_length: int, hop_length: int,
                  fft_size: int) -> np.ndarray:
    frames = _frame(samples, win_length, hop_length)
    return np.fft.rfft(frames * hann_window(win_length), n=fft_size, axis=1)


def _istft(spectra: np.ndarray, win_length: int, hop_length: int,
           fft_size: int) -> np.ndarray:
    """Least-squares inverse of _stft_complex (weighted overlap-add)."""
    window = hann_window(win_length)
    frames = np.fft.irfft(spectra, n=fft_size, axis=1)[:, :win_length]
    n_frames = spectra.shape[0]
    length = (n_frames - 1) * hop_length + win_length
    num = np.zeros(length)
    den = np.zeros(length)
    wsq = window * window
    for t in range(n_frames):
        start = t * hop_length
        num[start : start + win_length] += window * frames[t]
        den[start : start + win_length] += wsq
    out = np.zeros(length)
    covered = den > 0.0
    out[covered] = num[covered] / den[covered]
    return out


def stft_magnitude(wav: Waveform, cfg: StftConfig) -> Spectrogram:
    """Hann-windowed magnitude STFT keeping bins 0..fft_size/2.

    Frames lie fully inside the signal (no padding), so
    T = 1 + floor((L - win) / hop).
    """
    win = cfg.window_length(wav.sample_rate_hz)
    hop = cfg.hop_length(wav.sample_rate_hz)
    spectra = _stft_complex(wav.samples, win, hop, cfg.fft_size)
    return Spectrogram(np.abs(spectra), SCALE_LINEAR, cfg)


def hz_to_mel(f_hz) -> np.ndarray:
    """HTK mel scale: 2595 log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 80, fft_size: int = 2048,
                   sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                   f_min: float = 0.0, f_max: Optional[float] = None) -> MelFilterbank:
    """Triangular filters with centers uniformly spaced on the mel scale.

    Adjacent filters overlap at each other's centers (each triangle spans the
    two neighboring centers) and peak at 1.
    """
    nyquist = sample_rate_hz / 2.0
    if f_max is None:
        f_max = nyquist
    if n_mels < 1:
        raise InvalidInputError(f"n_mels must be >= 1, got {n_mels}")
    if not (0.0 <= f_min < f_max):
        raise InvalidInputError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")
    if f_max > nyquist:
        raise InvalidInputError(f"f_max {f_max} Hz exceeds Nyquist {nyquist} Hz")

    n_bins = fft_size // 2 + 1
    centers_mel = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    centers_hz = mel_to_hz(centers_mel)
    bin_freqs = np.arange(n_bins) * (sample_rate_hz / fft_size)

    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = centers_hz[m], centers_hz[m + 1], centers_hz[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not weights[m].any():
            raise InvalidInputError(
                f"mel filter {m} covers no FFT bin; lower n_mels or raise fft_size"
            )
    return MelFilterbank(weights, float(f_min), float(f_max))


def to_log_mel(spec: Spectrogram, fb: MelFilterbank,
               floor: float = LOG_FLOOR) -> Spectrogram:
    """log(max(fb @ frame, floor)) per frame; shape T x n_mels."""
    if spec.scale != SCALE_LINEAR:
        raise InvalidInputError(f"to_log_mel expects linear magnitude, got {spec.scale}")
    if floor <= 0.0:
        raise InvalidInputError(f"floor must be positive, got {floor}")
    if spec.n_bins != fb.n_bins:
        raise ShapeError(
            f"filterbank has {fb.n_bins} bins but spectrogram has {spec.n_bins}"
        )
    mel = spec.frames @ fb.weights.T
    out = np.log(np.maximum(mel, floor))
    return Spectrogram(out, SCALE_LOG_MEL, spec.config)


def mel_pseudo_inverse(spec: Spectrogram, fb: MelFilterbank) -> Spectrogram:
    """Approximate linear magnitudes from log-mel via the clipped pseudo-inverse.

    Lossy by design: the mel projection discards within-band detail.
    """
    if spec.scale != SCALE_LOG_MEL:
        raise InvalidInputError(f"mel_pseudo_inverse expects log_mel, got {spec.scale}")
    if spec.n_bins != fb.n_mels:
        raise ShapeError(
            f"filterbank has {fb.n_mels} mel channels but spectrogram has {spec.n_bins}"
        )
    energies = np.exp(spec.frames.astype(np.float64))
    linear = energies @ np.linalg.pinv(fb.weights).T
    return Spectrogram(np.clip(linear, 0.0, None), SCALE_LINEAR, spec.config)


def _spectral_objective(mag: np.ndarray, target: np.ndarray) -> float:
    """Frobenius distance over the full conjugate-symmetric spectrum.

    rfft keeps half the bins, so interior bins count twice; this is the norm
    in which the Griffin-Lim projections are orthogonal and the objective is
    provably non-increasing.
    """
    weights = np.full(mag.shape[1], 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    diff = mag - target
    return float(np.sqrt(np.sum(weights * diff * diff)))


def griffin_lim_steps(target_mag: Spectrogram, n_iters: int, seed: int,
                      sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                      ) -> Iterator[Tuple[np.ndarray, float]]:
    """Yield (samples, spectral objective) after each Griffin-Lim iteration.

    The initial phase is uniform in [-pi, pi) from the seed.  No de-emphasis
    is applied here; griffin_lim does that on the final iterate.
    """
    if target_mag.scale != SCALE_LINEAR:
        raise InvalidInputError(f"griffin_lim expects linear magnitude, got {target_mag.scale}")
    if n_iters < 1:
        raise InvalidInputError(f"n_iters must be >= 1, got {n_iters}")
    cfg = target_mag.config if target_mag.config is not None else StftConfig()
    win = cfg.window_length(sample_rate_hz)
    hop = cfg.hop_length(sample_rate_hz)
    mag = target_mag.frames.astype(np.float64)

    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    spectra = mag * np.exp(1j * phase)
    for _ in range(n_iters):
        samples = _istft(spectra, win, hop, cfg.fft_size)
        estimate = _stft_complex(samples, win, hop, cfg.fft_size)
        est_mag = np.abs(estimate)
        objective = _spectral_objective(est_mag, mag)
        spectra = mag * estimate / np.maximum(est_mag, 1e-12)
        yield samples, objective


def griffin_lim(target_mag: Spectrogram, n_iters: int = 60, seed: int = 0,
                sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Reconstruct a waveform whose STFT magnitude approximates target_mag.

    Iterates magnitude substitution against the least-squares iSTFT from a
    seeded random phase; de-emphasis (the inverse of the analysis
    pre-emphasis) is applied to the final iterate.
    """
    samples = None
    for samples, _ in griffin_lim_steps(target_mag, n_iters, seed, sample_rate_hz):
        pass
    cfg = target_mag.config if target_mag.config is not None else StftConfig()
    return deemphasize(Waveform(samples, sample_rate_hz), cfg.preemphasis)


def mcd(y: Spectrogram, y_hat: Spectrogram, mode: str = "paper") -> float:
    """Mel-cepstral distortion between same-scale spectrograms; lower is better.

    mode="paper": (10/ln 10) sqrt(2 sum_t ||y_t - yhat_t||^2), one distance
    for the whole utterance.  mode="per_frame": the conventional per-frame
    (10/ln 10) sqrt(2 ||y_t - yhat_t||^2) averaged over frames.
    """
    if y.frames.shape != y_hat.frames.shape:
        raise ShapeError(f"mcd: shape mismatch {y.frames.shape} vs {y_hat.frames.shape}")
    if y.scale != y_hat.scale:
        raise InvalidInputError(f"mcd: scale mismatch {y.scale} vs {y_hat.scale}")
    if y.n_frames == 0:
        raise InvalidInputError("mcd: empty spectrograms")
    diff = y.frames.astype(np.float64) - y_hat.frames.astype(np.float64)
    sq_per_frame = np.sum(diff * diff, axis=1)
    if mode == "paper":
        return float(_MCD_CONST * np.sqrt(2.0 * np.sum(sq_per_frame)))
    if mode == "per_frame":
        return float(np.mean(_MCD_CONST * np.sqrt(2.0 * sq_per_frame)))
    raise InvalidInputError(f"unknown mcd mode {mode!r}")
