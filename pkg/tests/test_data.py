"""Corpus synthesis, manifests, feature cache, pairing, batching."""

import json

import numpy as np
import pytest

from audiomorph import data as data_mod
from audiomorph import dsp, formats
from audiomorph.data import (
    ClipFeatures,
    FeatureConfig,
    ManifestEntry,
    StyleSpec,
    SynthConfig,
)
from audiomorph.errors import InvalidInputError

from conftest import TINY_SYNTH


class TestSynthesis:
    def test_clip_rendering_deterministic(self):
        cfg = SynthConfig()
        rng1 = np.random.default_rng([7, 0, 60])
        rng2 = np.random.default_rng([7, 0, 60])
        a = data_mod.render_clip(cfg.styles[0], 60, cfg, rng1)
        b = data_mod.render_clip(cfg.styles[0], 60, cfg, rng2)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_pitch_places_f0(self):
        cfg = SynthConfig()
        wav = data_mod.render_clip(StyleSpec("pure", "sine"), 69, cfg,
                                   np.random.default_rng(0))
        spectrum = np.abs(np.fft.rfft(wav.samples * np.hanning(len(wav.samples))))
        peak_hz = np.argmax(spectrum) * cfg.sample_rate_hz / len(wav.samples)
        assert abs(peak_hz - 440.0) < 4.0

    def test_styles_have_distinct_spectra(self):
        # Compare in log-mel space: linear magnitude is dominated by the
        # fundamental, which every style shares.
        cfg = SynthConfig()
        fc = FeatureConfig()
        specs = []
        for style in cfg.styles:
            wav = data_mod.render_clip(style, 60, cfg, np.random.default_rng(1))
            specs.append(data_mod.featurize(wav, fc).frames.mean(axis=0))
        for i in range(len(specs)):
            for j in range(i + 1, len(specs)):
                rms = np.sqrt(np.mean((specs[i] - specs[j]) ** 2))
                assert rms > 0.5, f"styles {i} and {j} almost identical"

    def test_harmonics_stay_below_nyquist(self):
        cfg = SynthConfig()
        wav = data_mod.render_clip(StyleSpec("bright", "sawtooth"), 100, cfg,
                                   np.random.default_rng(2))
        spectrum = np.abs(np.fft.rfft(wav.samples))
        freqs = np.fft.rfftfreq(len(wav.samples), 1 / cfg.sample_rate_hz)
        band = spectrum[freqs > 0.97 * cfg.sample_rate_hz / 2]
        assert band.max() < 0.01 * spectrum.max()

    def test_envelope_starts_and_ends_quiet(self):
        cfg = SynthConfig()
        wav = data_mod.render_clip(cfg.styles[1], 60, cfg,
                                   np.random.default_rng(3))
        assert np.abs(wav.samples[:8]).max() < 0.05
        assert np.abs(wav.samples[-8:]).max() < 0.05
        mid = len(wav.samples) // 2
        assert np.abs(wav.samples[mid - 400 : mid + 400]).max() > 0.2

    def test_midi_to_hz(self):
        assert data_mod.midi_to_hz(69) == 440.0
        assert abs(data_mod.midi_to_hz(81) - 880.0) < 1e-9
        assert abs(data_mod.midi_to_hz(60) - 261.6255653) < 1e-6


class TestCorpus:
    def test_holdout_pitches_interior_evenly_spaced(self):
        cfg = SynthConfig(n_pitches=24, midi_low=48, holdout_pitches=4)
        assert cfg.test_pitches() == [51, 57, 63, 69]
        cfg = SynthConfig(n_pitches=6, midi_low=60, holdout_pitches=2)
        assert cfg.test_pitches() == [61, 64]
        cfg = SynthConfig(n_pitches=10, midi_low=0, holdout_pitches=0)
        assert cfg.test_pitches() == []

    def test_synth_dataset_layout(self, tiny_corpus):
        entries = data_mod.load_manifest(tiny_corpus)
        assert len(entries) == 12  # 2 styles x 6 pitches
        test = [e for e in entries if e.split == "test"]
        assert len(test) == 4
        assert {e.midi_pitch for e in test} == {49, 52}
        for e in entries[:3]:
            wav = formats.read_wav(tiny_corpus / e.path, e.sample_rate_hz)
            assert len(wav.samples) == e.n_samples

    def test_rerender_is_bit_identical(self, tiny_corpus, tmp_path):
        data_mod.synth_dataset(tmp_path, TINY_SYNTH, seed=7)
        for name in ("manifest.jsonl", "wav/flute_p048.wav", "wav/brass_p052.wav"):
            assert (tmp_path / name).read_bytes() == \
                (tiny_corpus / name).read_bytes(), name

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            SynthConfig(n_pitches=4, holdout_pitches=4)
        with pytest.raises(InvalidInputError):
            SynthConfig(styles=(StyleSpec("a"), StyleSpec("a")))
        with pytest.raises(InvalidInputError):
            StyleSpec("x", waveform="noise")

    def test_manifest_roundtrip(self, tmp_path):
        entry = ManifestEntry("id1", "wav/id1.wav", 0, "flute", 60, "p060",
                              "train", 16000, 8000)
        data_mod.write_manifest(tmp_path / "m.jsonl", [entry])
        back = data_mod.load_manifest(tmp_path / "m.jsonl")
        assert back == [entry]

    def test_corrupt_manifest_line_reported(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"clip_id": "a"}\nnot json\n')
        with pytest.raises(InvalidInputError, match="line 1"):
            data_mod.load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidInputError, match="not found"):
            data_mod.load_manifest(tmp_path / "nope.jsonl")


class TestFeatures:
    def test_featurize_shape_and_dtype(self, tiny_corpus, feature_cfg):
        entries = data_mod.load_manifest(tiny_corpus)
        wav = formats.read_wav(tiny_corpus / entries[0].path, 16000)
        spec = data_mod.featurize(wav, feature_cfg)
        assert spec.frames.dtype == np.float32
        assert spec.frames.shape[1] == 80
        assert spec.scale == dsp.SCALE_LOG_MEL
        n_expected = dsp.frame_count(len(wav.samples), 800, 200)
        assert spec.frames.shape[0] == n_expected

    def test_rate_mismatch_rejected(self, feature_cfg):
        wav = dsp.Waveform(np.zeros(22050), 22050)
        with pytest.raises(InvalidInputError, match="rate"):
            data_mod.featurize(wav, feature_cfg)

    def test_cache_round_trip_and_hit(self, tiny_corpus, feature_cfg, tmp_path):
        entries = data_mod.load_manifest(tiny_corpus)
        wav_path = tiny_corpus / entries[0].path
        cache = tmp_path / "cache"
        cold = data_mod.features_for_file(wav_path, feature_cfg, cache_dir=cache)
        cached_files = list(cache.glob("*.amspec"))
        assert len(cached_files) == 1
        warm = data_mod.features_for_file(wav_path, feature_cfg, cache_dir=cache)
        np.testing.assert_array_equal(cold.frames, warm.frames)
        none = data_mod.features_for_file(wav_path, feature_cfg)
        np.testing.assert_array_equal(cold.frames, none.frames)

    def test_cache_key_depends_on_config(self, tiny_corpus, tmp_path):
        entries = data_mod.load_manifest(tiny_corpus)
        wav_path = tiny_corpus / entries[0].path
        cache = tmp_path / "cache"
        data_mod.features_for_file(wav_path, FeatureConfig(), cache_dir=cache)
        data_mod.features_for_file(wav_path, FeatureConfig(n_mels=40),
                                   cache_dir=cache)
        assert len(list(cache.glob("*.amspec"))) == 2

    def test_cache_env_var(self, tiny_corpus, feature_cfg, tmp_path, monkeypatch):
        cache = tmp_path / "envcache"
        monkeypatch.setenv("AUDIOMORPH_CACHE", str(cache))
        entries = data_mod.load_manifest(tiny_corpus)
        data_mod.features_for_file(tiny_corpus / entries[0].path, feature_cfg)
        assert len(list(cache.glob("*.amspec"))) == 1

    def test_feature_config_roundtrip(self):
        fc = FeatureConfig(n_mels=40, f_min_hz=50.0, f_max_hz=7000.0)
        assert FeatureConfig.from_dict(fc.to_dict()) == fc

    def test_load_features_split_filter(self, tiny_clips):
        assert len(tiny_clips["train"]) == 8
        assert len(tiny_clips["test"]) == 4
        assert all(c.entry.split == "test" for c in tiny_clips["test"])


def _clip(content, style_id, frames=None):
    entry = ManifestEntry(f"s{style_id}_{content}", "x.wav", style_id,
                          f"style{style_id}", 60, content, "train", 16000, 100)
    if frames is None:
        frames = np.zeros((5, 4), dtype=np.float32)
    return ClipFeatures(entry, frames)


class TestPairs:
    def test_ordered_cross_style_pairs(self):
        clips = [_clip("p1", 0), _clip("p1", 1), _clip("p1", 2)]
        pairs = data_mod.build_pairs(clips)
        combos = {(p.src.entry.style_id, p.tgt.entry.style_id) for p in pairs}
        assert combos == {(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)}

    def test_single_style_content_skipped_with_warning(self, caplog):
        clips = [_clip("p1", 0), _clip("p1", 1), _clip("p2", 0)]
        with caplog.at_level("WARNING", logger="audiomorph.data"):
            pairs = data_mod.build_pairs(clips)
        assert len(pairs) == 2
        assert any("p2" in r.message for r in caplog.records)

    def test_identity_option(self):
        clips = [_clip("p1", 0), _clip("p1", 1)]
        pairs = data_mod.build_pairs(clips, include_identity=True)
        assert len(pairs) == 4
        assert len(data_mod.identity_pairs(clips)) == 2


class TestBatching:
    def test_padding_and_masks(self):
        rng = np.random.default_rng(0)
        a = _clip("p1", 0, rng.standard_normal((5, 4)).astype(np.float32))
        b = _clip("p1", 1, rng.standard_normal((3, 4)).astype(np.float32))
        batch = data_mod.make_batch([data_mod.TransferPair(a, b),
                                     data_mod.TransferPair(b, a)])
        assert batch["src"].shape == (2, 5, 4)
        assert batch["tgt"].shape == (2, 5, 4)
        np.testing.assert_array_equal(batch["src_mask"][0], np.ones(5))
        np.testing.assert_array_equal(batch["src_mask"][1],
                                      [1, 1, 1, 0, 0])
        # padded region holds the silence floor
        np.testing.assert_allclose(batch["src"][1, 3:], np.log(1e-5))
        np.testing.assert_array_equal(batch["src_styles"], [0, 1])
        np.testing.assert_array_equal(batch["tgt_styles"], [1, 0])

    def test_epoch_keyed_shuffle(self):
        clips = [_clip(f"p{i}", s) for i in range(6) for s in (0, 1)]
        pairs = data_mod.build_pairs(clips)
        ids = lambda batches: [b["pair_ids"] for b in batches]
        a = ids(data_mod.batch_iterator(pairs, 4, seed=3, epoch=0))
        b = ids(data_mod.batch_iterator(pairs, 4, seed=3, epoch=0))
        c = ids(data_mod.batch_iterator(pairs, 4, seed=3, epoch=1))
        assert a == b
        assert a != c

    def test_final_short_batch_kept(self):
        clips = [_clip(f"p{i}", s) for i in range(5) for s in (0, 1)]
        pairs = data_mod.build_pairs(clips)  # 10 pairs
        batches = list(data_mod.batch_iterator(pairs, 4, seed=0, epoch=0))
        assert [b["src"].shape[0] for b in batches] == [4, 4, 2]

    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidInputError):
            data_mod.make_batch([])
        with pytest.raises(InvalidInputError):
            list(data_mod.batch_iterator([], 0, 0, 0))


class TestMelJitter:
    def _batch(self, seed=0):
        rng = np.random.default_rng(seed)
        a = _clip("p1", 0, rng.standard_normal((4, 8)).astype(np.float32))
        b = _clip("p1", 1, rng.standard_normal((4, 8)).astype(np.float32))
        return data_mod.make_batch([data_mod.TransferPair(a, b)])

    def test_zero_shift_is_identity(self):
        batch = self._batch()
        out = data_mod.mel_jitter_batch(batch, 0, np.random.default_rng(0))
        assert out is batch

    def test_roll_directions_and_floor_fill(self):
        frames = np.arange(12, dtype=np.float32).reshape(3, 4)
        up = data_mod._roll_mel(frames, 1)
        np.testing.assert_allclose(up[:, 1:], frames[:, :-1])
        np.testing.assert_allclose(up[:, 0], np.log(1e-5))
        down = data_mod._roll_mel(frames, -2)
        np.testing.assert_allclose(down[:, :2], frames[:, 2:])
        np.testing.assert_allclose(down[:, 2:], np.log(1e-5))

    def test_source_and_target_share_the_shift(self):
        batch = self._batch()
        out = data_mod.mel_jitter_batch(batch, 3, np.random.default_rng(5))
        # recover the shift from src, confirm tgt used the same one
        for k in range(-3, 4):
            if np.allclose(out["src"][0], data_mod._roll_mel(batch["src"][0], k)):
                np.testing.assert_allclose(
                    out["tgt"][0], data_mod._roll_mel(batch["tgt"][0], k))
                break
        else:
            pytest.fail("output is not a roll of the input")

    def test_input_arrays_untouched(self):
        batch = self._batch()
        src_before = batch["src"].copy()
        data_mod.mel_jitter_batch(batch, 2, np.random.default_rng(1))
        np.testing.assert_array_equal(batch["src"], src_before)

    def test_negative_shift_rejected(self):
        with pytest.raises(InvalidInputError):
            data_mod.mel_jitter_batch(self._batch(), -1, np.random.default_rng(0))
