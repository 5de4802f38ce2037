"""Conditioned audio-to-audio spectrogram transformation.

A small numpy-based stack: STFT/mel feature extraction, a reverse-mode
autodiff engine with fused LSTM kernels (Cython with a pure-numpy fallback),
a conditioned sequence-to-sequence model, Griffin-Lim reconstruction, mel
cepstral distortion evaluation, and a synthetic timbre-transfer corpus.
"""

__version__ = "0.1.0"

from audiomorph.errors import (
    AudiomorphError,
    FormatError,
    GradientError,
    InvalidInputError,
    ShapeError,
    TrainingDivergedError,
    UnseenStyleError,
)

__all__ = [
    "AudiomorphError",
    "FormatError",
    "GradientError",
    "InvalidInputError",
    "ShapeError",
    "TrainingDivergedError",
    "UnseenStyleError",
    "__version__",
]
