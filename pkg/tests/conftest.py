"""Shared fixtures.

Thread pinning must happen before numpy loads its BLAS: multi-threaded GEMM
reorders float accumulation and would break the bitwise-reproducibility
tests.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from audiomorph import autodiff as ad
from audiomorph import data as data_mod
from audiomorph.model import ModelConfig, ModelParams


@pytest.fixture(autouse=True)
def _nan_checks():
    ad.set_nan_checks(True)
    yield
    ad.set_nan_checks(False)


TINY_SYNTH = data_mod.SynthConfig(
    styles=data_mod.DEFAULT_STYLES[:2],
    n_pitches=6,
    holdout_pitches=2,
    duration_s=0.35,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """2 styles x 6 pitches rendered once per session."""
    root = tmp_path_factory.mktemp("corpus")
    data_mod.synth_dataset(root, TINY_SYNTH, seed=7)
    return root


@pytest.fixture(scope="session")
def feature_cfg():
    return data_mod.FeatureConfig()


@pytest.fixture(scope="session")
def tiny_clips(tiny_corpus, feature_cfg):
    return {
        "train": data_mod.load_features(tiny_corpus, feature_cfg, split="train"),
        "test": data_mod.load_features(tiny_corpus, feature_cfg, split="test"),
    }


def tiny_model_config(n_styles=2, context_ms=50.0, **overrides) -> ModelConfig:
    defaults = dict(hidden_size=16, attention_size=12, conv_channels=6,
                    decoder_layers=2)
    defaults.update(overrides)
    return ModelConfig.for_context(context_ms, n_styles=n_styles, **defaults)


@pytest.fixture()
def tiny_params():
    cfg = ModelConfig.for_context(50.0, n_styles=2, hidden_size=16,
                                  attention_size=12, conv_channels=6)
    return ModelParams.initialize(cfg, seed=3)


def rand_logmel(rng, n_frames: int, n_mels: int) -> np.ndarray:
    """Plausible log-mel frames: floor-heavy with some energetic bands."""
    base = rng.uniform(-11.5, -8.0, size=(n_frames, n_mels))
    hot = rng.random((n_frames, n_mels)) < 0.25
    base[hot] = rng.uniform(-4.0, 4.0, size=int(hot.sum()))
    return base.astype(np.float32)
