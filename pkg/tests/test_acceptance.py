"""Acceptance gate: ten end-to-end criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
as they happen; without -s they still appear in the captured output of any
failing test.  The expensive piece is the toy transfer model (4 styles x
24 pitches, seed 7) shared by criteria 1, 3 and 8; it trains once per
module and stays well inside the 30-minute budget.
"""

import csv
import time

import numpy as np
import pytest

from audiomorph import autodiff as ad
from audiomorph import data as data_mod
from audiomorph import dsp
from audiomorph import model as model_mod
from audiomorph import train as train_mod
from audiomorph.autodiff import Tensor
from audiomorph.data import FeatureConfig, SynthConfig
from audiomorph.dsp import Spectrogram, StftConfig
from audiomorph.model import ModelConfig, ModelParams
from audiomorph.train import TrainConfig

from conftest import TINY_SYNTH, tiny_model_config
from test_autodiff import fd_check


def _verdict(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


# ---------------------------------------------------------------------------
# shared toy run (criteria 1, 3, 8)
# ---------------------------------------------------------------------------

RECIPE_TRAIN = TrainConfig(epochs=70, batch_size=16, learning_rate=3e-3,
                           lr_decay=0.99, mel_jitter=2, sample_prob=0.7,
                           average_tail=40, seed=7)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Train the full toy corpus once; criteria 1, 3 and 8 all read it."""
    root = tmp_path_factory.mktemp("acceptance")
    corpus = root / "corpus"
    cache = root / "cache"
    data_mod.synth_dataset(corpus, SynthConfig(), seed=7)
    fc = FeatureConfig()
    cfg = ModelConfig.for_context(50.0, n_styles=4)
    result = train_mod.train(root / "run", corpus / "manifest.jsonl", cfg,
                             fc, RECIPE_TRAIN, cache_dir=cache)
    params, _, _, _ = train_mod.load_model(result.checkpoint_path)
    train_clips = data_mod.load_features(corpus, fc, split="train",
                                         cache_dir=cache)
    test_clips = data_mod.load_features(corpus, fc, split="test",
                                        cache_dir=cache)
    report = train_mod.evaluate(params, test_clips, train_clips)
    return {
        "params": params,
        "train_clips": train_clips,
        "test_clips": test_clips,
        "report": report,
        "train_wall_s": result.wall_time_s,
    }


class TestCriterion1ToyTransfer:
    def test_beats_both_baselines_by_20_percent(self, toy_run):
        rep = toy_run["report"]
        model = rep.model_mcd["per_frame"]
        ident = rep.identity_mcd["per_frame"]
        meanf = rep.mean_frame_mcd["per_frame"]
        wall = toy_run["train_wall_s"]
        target = 0.8 * min(ident, meanf)
        ok = (model <= 0.8 * ident and model <= 0.8 * meanf
              and wall <= 1800.0 and rep.n_pairs == 48)
        _verdict(1, ok,
                 f"test MCD {model:.2f} vs identity {ident:.2f} and "
                 f"mean-frame {meanf:.2f} (need <= {target:.2f}) over "
                 f"{rep.n_pairs} pairs; trained in {wall:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: finite-difference gradient suite
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * 2 * margin, x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True,
                  dtype=np.float64)


def _proj(rng, out_shape):
    """Fixed random cotangent so every output entry matters."""
    w = Tensor(rng.standard_normal(out_shape))

    def to_scalar(out):
        return ad.tensor_sum(ad.mul(out, w))

    return to_scalar


def _op_case(op, rng, i):
    """One random FD instance for a single op: (build, tensors)."""
    m = int(rng.integers(2, 5))
    n = int(rng.integers(2, 6))
    if op == "add":
        a, b = _t(rng, m, n), _t(rng, *((n,) if i % 2 else (m, n)))
        p = _proj(rng, (m, n))
        return lambda a, b: p(ad.add(a, b)), [a, b]
    if op == "sub":
        a, b = _t(rng, m, n), _t(rng, *((m, 1) if i % 2 else (m, n)))
        p = _proj(rng, (m, n))
        return lambda a, b: p(ad.sub(a, b)), [a, b]
    if op == "mul":
        a, b = _t(rng, m, n), _t(rng, *((n,) if i % 2 else (m, n)))
        p = _proj(rng, (m, n))
        return lambda a, b: p(ad.mul(a, b)), [a, b]
    if op == "scale":
        a = _t(rng, m, n)
        factor = float(rng.uniform(-3.0, 3.0))
        p = _proj(rng, (m, n))
        return lambda a: p(ad.scale(a, factor)), [a]
    if op == "matmul":
        k = int(rng.integers(2, 5))
        if i % 2:
            a, b = _t(rng, 3, m, k), _t(rng, k, n)
            p = _proj(rng, (3, m, n))
        else:
            a, b = _t(rng, m, k), _t(rng, k, n)
            p = _proj(rng, (m, n))
        return lambda a, b: p(ad.matmul(a, b)), [a, b]
    if op == "concat":
        axis = -1 if i % 2 else 0
        if axis == -1:
            parts = [_t(rng, m, int(rng.integers(1, 4))) for _ in range(3)]
            width = sum(t.shape[-1] for t in parts)
            p = _proj(rng, (m, width))
        else:
            parts = [_t(rng, int(rng.integers(1, 4)), n) for _ in range(3)]
            height = sum(t.shape[0] for t in parts)
            p = _proj(rng, (height, n))
        return lambda *ts: p(ad.concat(list(ts), axis=axis)), parts
    if op == "getitem":
        a = _t(rng, m + 2, n + 2)
        keys = [
            (slice(1, m + 1), slice(None, None, 2)),
            (0,),
            (slice(None), n // 2),
            (slice(m, None), slice(1, n + 1)),
        ]
        key = keys[i % len(keys)]
        out_shape = a.data[key].shape
        p = _proj(rng, out_shape)
        return lambda a: p(a[key]), [a]
    if op == "reshape":
        a = _t(rng, m, n)
        shapes = [(m * n,), (1, m * n), (n, m)]
        shape = shapes[i % len(shapes)]
        p = _proj(rng, shape)
        return lambda a: p(ad.reshape(a, shape)), [a]
    if op == "pad_axis":
        a = _t(rng, m, n)
        axis = i % 2
        before, after = (i % 3, (i + 1) % 3)
        out_shape = list(a.shape)
        out_shape[axis] += before + after
        p = _proj(rng, tuple(out_shape))
        return lambda a: p(ad.pad_axis(a, axis, before, after)), [a]
    if op == "tanh":
        a = _t(rng, m, n)
        p = _proj(rng, (m, n))
        return lambda a: p(ad.tanh(a)), [a]
    if op == "sigmoid":
        a = _t(rng, m, n)
        p = _proj(rng, (m, n))
        return lambda a: p(ad.sigmoid(a)), [a]
    if op == "relu":
        a = _away_from_zero(rng, (m, n))
        p = _proj(rng, (m, n))
        return lambda a: p(ad.relu(a)), [a]
    if op == "softmax":
        a = _t(rng, m, n)
        axis = -1 if i % 2 else 0
        p = _proj(rng, (m, n))
        return lambda a: p(ad.softmax(a, axis=axis)), [a]
    if op == "sum":
        a = _t(rng, m, n)
        if i % 3 == 0:
            return lambda a: ad.tanh(ad.tensor_sum(a)), [a]
        axis = i % 2
        keep = i % 4 >= 2
        out_shape = np.sum(np.zeros((m, n)), axis=axis, keepdims=keep).shape
        p = _proj(rng, out_shape)
        return lambda a: p(ad.tensor_sum(a, axis=axis, keepdims=keep)), [a]
    if op == "mse_loss":
        a = _t(rng, m, n)
        target = rng.standard_normal((m, n))
        return lambda a: ad.mse_loss(a, target), [a]
    if op == "lstm_gates":
        b, h = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        pre, c_prev = _t(rng, b, 4 * h), _t(rng, b, h)
        p = _proj(rng, (b, 2 * h))
        return lambda pre, c_prev: p(ad.lstm_gates(pre, c_prev)), [pre, c_prev]
    raise AssertionError(f"no FD case for op {op!r}")


def _composed_case(seed):
    """Full train-step graph: conv, pyramid, attention, scheduled decode
    off, masked MSE; float64 params so the FD oracle is meaningful."""
    rng = np.random.default_rng([20, seed])
    cfg = ModelConfig(n_styles=2, n_mels=6, conv_layers=((3, 3, 2),),
                      pyramid_layers=1, hidden_size=5, decoder_layers=2,
                      attention_size=4, context_ms=50.0)
    params = ModelParams.initialize(cfg, seed=seed, dtype=np.float64)
    b, ts, tt = 2, int(rng.integers(5, 10)), int(rng.integers(4, 8))
    src = rng.uniform(-8.0, 0.0, size=(b, ts, 6))
    tgt = rng.uniform(-8.0, 0.0, size=(b, tt, 6))
    src_mask = np.ones((b, ts))
    tgt_mask = np.ones((b, tt))
    src_mask[1, ts - 1:] = 0.0
    tgt_mask[1, tt - 1:] = 0.0
    batch = {"src": src, "src_mask": src_mask, "src_styles": [0, 1],
             "tgt": tgt, "tgt_mask": tgt_mask, "tgt_styles": [1, 0]}
    build = lambda *ts_: model_mod.loss_on_batch(params, batch)
    return build, params.trainable()


class TestCriterion2GradientSuite:
    def test_all_ops_and_composed_graph(self):
        t0 = time.perf_counter()
        ok = True
        detail = ""
        try:
            missing = [op for op in ad.ALL_OPS]
            for op_idx, op in enumerate(ad.ALL_OPS):
                for i in range(20):
                    rng = np.random.default_rng([2, op_idx, i])
                    build, tensors = _op_case(op, rng, i)
                    fd_check(build, tensors)
                missing.remove(op)
            assert not missing, f"ops without FD coverage: {missing}"
            for i in range(20):
                build, tensors = _composed_case(i)
                fd_check(build, tensors, probes=2, seed=i)
        except AssertionError as exc:
            ok = False
            detail = str(exc).splitlines()[0]
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < 60.0
        _verdict(2, ok,
                 detail or f"{len(ad.ALL_OPS)} ops x 20 instances plus "
                           f"20 composed train-step graphs matched central "
                           f"differences in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: attention rows on a free-running decode
# ---------------------------------------------------------------------------

class TestCriterion3AttentionRows:
    def test_rows_are_distributions(self, toy_run):
        params = toy_run["params"]
        by_style = {c.entry.style_id: c for c in toy_run["test_clips"]}
        worst_sum = 0.0
        worst_neg = 0.0
        n_rows = 0
        for clip in by_style.values():
            target = (clip.entry.style_id + 1) % params.cfg.n_styles
            _, att = model_mod.transform(params, clip.frames,
                                         clip.entry.style_id, target,
                                         trim_silence=False)
            worst_sum = max(worst_sum, float(np.abs(att.sum(axis=1) - 1.0).max()))
            worst_neg = min(worst_neg, float(att.min()))
            n_rows += len(att)
        ok = worst_sum <= 1e-6 and worst_neg >= 0.0 and n_rows > 0
        _verdict(3, ok,
                 f"{n_rows} attention rows over {len(by_style)} free decodes: "
                 f"max |sum-1| {worst_sum:.2e}, min entry {worst_neg:.2e}")


# ---------------------------------------------------------------------------
# criterion 4: encoder length law
# ---------------------------------------------------------------------------

class TestCriterion4LengthLaws:
    def test_closed_form_matches_encoder(self):
        rng = np.random.default_rng(4)
        n_odd = 0
        failures = []
        with ad.no_grad():
            for case in range(200):
                n_conv = int(rng.integers(1, 3))
                strides = tuple(int(rng.integers(1, 4)) for _ in range(n_conv))
                pyramid = int(rng.integers(0, 3))
                reduction = int(np.prod(strides)) * 2 ** pyramid
                cfg = ModelConfig(
                    n_styles=2, n_mels=8,
                    conv_layers=tuple((4, 3, s) for s in strides),
                    pyramid_layers=pyramid, hidden_size=8, attention_size=8,
                    decoder_layers=1, context_ms=12.5 * reduction)
                params = ModelParams.initialize(cfg, seed=case)
                t = int(rng.integers(reduction, reduction + 120))
                if case % 2 == 0:
                    t |= 1
                n_odd += t % 2
                frames = rng.uniform(-10.0, 0.0,
                                     size=(1, t, 8)).astype(np.float32)
                enc_h, _, final = model_mod.encode_batch(params, frames, [0])
                expect = cfg.encoder_output_length(t)
                if enc_h.shape != (1, expect, cfg.hidden_size) or \
                        final.shape != (1, cfg.hidden_size):
                    failures.append((t, strides, pyramid, enc_h.shape, expect))
        ok = not failures
        _verdict(4, ok,
                 f"200 random (T, strides, pyramid) combinations "
                 f"({n_odd} odd lengths) matched the closed form"
                 if ok else f"mismatches: {failures[:3]}")


# ---------------------------------------------------------------------------
# criterion 5: Griffin-Lim objective and tone reconstruction
# ---------------------------------------------------------------------------

def _tone(freq_hz=440.0, dur_s=0.5):
    t = np.arange(int(16000 * dur_s)) / 16000.0
    samples = 0.6 * np.sin(2 * np.pi * freq_hz * t)
    return dsp.Waveform(samples.astype(np.float32), 16000)


class TestCriterion5GriffinLim:
    def test_monotone_objective_and_peak(self):
        cfg = StftConfig()
        mag = dsp.stft_magnitude(dsp.preemphasize(_tone(), cfg.preemphasis),
                                 cfg)
        bin_hz = 16000 / cfg.fft_size
        worst_rise = -np.inf
        worst_peak_err = 0.0
        for seed in range(10):
            objs = []
            samples = None
            for samples, obj in dsp.griffin_lim_steps(mag, 60, seed):
                objs.append(obj)
            worst_rise = max(worst_rise, float(np.diff(objs).max()))
            out = dsp.deemphasize(dsp.Waveform(samples, 16000),
                                  cfg.preemphasis)
            spec = dsp.stft_magnitude(out, cfg)
            peak_hz = float(np.argmax(spec.frames.mean(axis=0))) * bin_hz
            worst_peak_err = max(worst_peak_err, abs(peak_hz - 440.0))
        ok = worst_rise <= 1e-9 and worst_peak_err <= bin_hz
        _verdict(5, ok,
                 f"10 seeds x 60 iterations: max objective rise "
                 f"{worst_rise:.2e}, worst peak error {worst_peak_err:.2f} Hz "
                 f"(1 bin = {bin_hz:.2f} Hz)")


# ---------------------------------------------------------------------------
# criterion 6: overfit sanity on a fixed batch
# ---------------------------------------------------------------------------

class TestCriterion6OverfitSanity:
    def test_200_steps_halve_mse(self, tiny_clips):
        pairs = data_mod.build_pairs(tiny_clips["train"])
        assert len(pairs) == 8
        batch = data_mod.make_batch(pairs)
        params = ModelParams.initialize(tiny_model_config(), seed=3)
        opt = ad.Adam(params.trainable(), learning_rate=3e-3)
        first = None
        all_finite = True
        for _ in range(200):
            loss = model_mod.loss_on_batch(params, batch)
            value = float(loss.data)
            all_finite = all_finite and np.isfinite(value)
            if first is None:
                first = value
            opt.zero_grads()
            ad.backward(loss)
            opt.step()
        final = float(model_mod.loss_on_batch(params, batch).data)
        ok = all_finite and np.isfinite(final) and final <= 0.5 * first
        _verdict(6, ok,
                 f"MSE {first:.4f} -> {final:.4f} after 200 teacher-forced "
                 f"steps on a fixed 8-example batch "
                 f"({100.0 * (1.0 - final / first):.0f}% reduction)")


# ---------------------------------------------------------------------------
# criterion 7: ablation protocol over all five contexts
# ---------------------------------------------------------------------------

class TestCriterion7AblationProtocol:
    def test_five_contexts_and_reproducible_rows(self, tiny_corpus,
                                                 feature_cfg, tmp_path):
        train_cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=3e-3,
                                seed=11)
        overrides = dict(hidden_size=16, attention_size=12, conv_channels=6,
                         decoder_layers=1)
        manifest = tiny_corpus / "manifest.jsonl"
        cache = tmp_path / "cache"
        rows_a = train_mod.ablate_context(tmp_path / "a", manifest,
                                          feature_cfg, train_cfg,
                                          model_overrides=overrides,
                                          cache_dir=cache)
        rows_b = train_mod.ablate_context(tmp_path / "b", manifest,
                                          feature_cfg, train_cfg,
                                          model_overrides=overrides,
                                          cache_dir=cache)
        csv_a = (tmp_path / "a" / "ablation.csv").read_bytes()
        csv_b = (tmp_path / "b" / "ablation.csv").read_bytes()
        with open(tmp_path / "a" / "ablation.csv", newline="") as fh:
            parsed = list(csv.DictReader(fh))
        contexts = [float(r["context_ms"]) for r in parsed]
        finite = all(np.isfinite(float(r["mean_mcd"]))
                     and np.isfinite(float(r["ci95"]))
                     and int(r["n_pairs"]) == 4 for r in parsed)
        metrics_equal = all(
            a["mean_mcd"] == b["mean_mcd"] and a["ci95"] == b["ci95"]
            for a, b in zip(rows_a, rows_b))
        ok = (len(parsed) == 5
              and contexts == list(train_mod.ABLATION_CONTEXTS)
              and finite and metrics_equal and csv_a == csv_b)
        _verdict(7, ok,
                 f"5-row CSV over contexts {contexts} with finite means and "
                 f"CIs; rerun with identical seeds is byte-identical: "
                 f"{csv_a == csv_b}")


# ---------------------------------------------------------------------------
# criterion 8: embedding structure on the trained toy model
# ---------------------------------------------------------------------------

class TestCriterion8EmbeddingStructure:
    def test_intra_pitch_tighter_than_inter(self, toy_run):
        pairs = train_mod.clip_embeddings(toy_run["params"],
                                          toy_run["test_clips"])
        sep = train_mod.embedding_separation(pairs)
        ok = (sep["n_intra"] > 0 and sep["n_inter"] > 0
              and sep["intra_mean"] < sep["inter_mean"])
        _verdict(8, ok,
                 f"mean cosine distance same-pitch {sep['intra_mean']:.3f} "
                 f"({sep['n_intra']} pairs) vs cross-pitch "
                 f"{sep['inter_mean']:.3f} ({sep['n_inter']} pairs)")


# ---------------------------------------------------------------------------
# criterion 9: bitwise determinism
# ---------------------------------------------------------------------------

class TestCriterion9Determinism:
    def test_train_and_synth_are_bitwise_deterministic(self, tiny_corpus,
                                                       feature_cfg, tmp_path):
        cfg = tiny_model_config()
        train_cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=3e-3,
                                seed=11)
        manifest = tiny_corpus / "manifest.jsonl"
        r1 = train_mod.train(tmp_path / "r1", manifest, cfg, feature_cfg,
                             train_cfg)
        r2 = train_mod.train(tmp_path / "r2", manifest, cfg, feature_cfg,
                             train_cfg)
        ckpt_same = (
            r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
            and (tmp_path / "r1" / train_mod.CHECKPOINT_LAST).read_bytes()
            == (tmp_path / "r2" / train_mod.CHECKPOINT_LAST).read_bytes())

        data_mod.synth_dataset(tmp_path / "c1", TINY_SYNTH, seed=7)
        data_mod.synth_dataset(tmp_path / "c2", TINY_SYNTH, seed=7)
        wavs1 = sorted((tmp_path / "c1" / "wav").glob("*.wav"))
        wavs2 = sorted((tmp_path / "c2" / "wav").glob("*.wav"))
        wavs_same = (
            [p.name for p in wavs1] == [p.name for p in wavs2]
            and len(wavs1) == 12
            and all(a.read_bytes() == b.read_bytes()
                    for a, b in zip(wavs1, wavs2)))
        ok = ckpt_same and wavs_same
        _verdict(9, ok,
                 f"two seeded train runs bitwise-identical: {ckpt_same}; "
                 f"{len(wavs1)} re-rendered WAVs byte-identical: {wavs_same}")


# ---------------------------------------------------------------------------
# criterion 10: MCD unit-error oracle
# ---------------------------------------------------------------------------

class TestCriterion10MetricOracle:
    def test_single_frame_unit_error(self):
        # hand-evaluated: one frame, squared difference summing to 1, gives
        # (10 / ln 10) * sqrt(2)
        oracle = 6.141851463713753
        ref = Spectrogram(np.zeros((1, 80)), dsp.SCALE_LOG_MEL)
        pred = np.zeros((1, 80))
        pred[0, 0] = 1.0
        got = dsp.mcd(ref, Spectrogram(pred, dsp.SCALE_LOG_MEL), mode="paper")
        err = abs(got - oracle)
        ok = err <= 1e-6
        _verdict(10, ok,
                 f"paper-mode MCD of the unit-error frame = {got!r}, "
                 f"oracle {oracle!r}, error {err:.2e}")
