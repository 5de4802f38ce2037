"""Conditioned sequence-to-sequence spectrogram transformation model.

Encoder: 1-D time convolutions (relu, SAME padding) reduce the frame rate,
a one-hot source-style vector is concatenated to every conv output frame,
then a unidirectional LSTM plus pyramidal LSTM layers that consume
concatenated pairs of the layer below halve the resolution per layer.

Decoder: a stacked LSTM whose input is [previous frame, previous context,
one-hot target style], additive attention over encoder states computed from
the pre-update decoder state, and a linear projection of [state, context]
that emits the next log-mel frame.

Batched graph builders (used for training) and single-example numpy wrappers
(used for inference and as an independent second path in tests) share the
same parameters and kernel ops.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from audiomorph import autodiff as ad
from audiomorph.autodiff import Tensor
from audiomorph.dsp import LOG_FLOOR, SCALE_LOG_MEL, Spectrogram
from audiomorph.errors import InvalidInputError, ShapeError, UnseenStyleError

# Fixed affine between raw log-mel and the network's operating range.  The
# center sits between the log floor (~-11.5) and loud-frame values (~+4), so
# typical frames standardize to roughly zero mean, unit scale, and the
# zero-initialized output projection rests at a mid-level frame.
INPUT_CENTER = -4.0
INPUT_SCALE = 4.0

# Trailing frames quieter than this mean log-mel value are trimmed after a
# free-running decode.
SILENCE_THRESHOLD = float(np.log(2.0 * LOG_FLOOR))

# context_ms -> (conv strides, pyramid layers); the stride product times
# 2^pyramid_layers is the temporal reduction factor R = context_ms / hop_ms.
_CONTEXT_LAYOUTS = {
    12.5: ((1, 1), 0),
    25.0: ((2, 1), 0),
    50.0: ((2, 1), 1),
    100.0: ((2, 1), 2),
    200.0: ((2, 2), 2),
}

ATTENTION_FORMS = ("additive", "dot_mlp")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; see for_context for the standard layouts."""

    n_styles: int
    n_mels: int = 80
    conv_layers: Tuple[Tuple[int, int, int], ...] = ((32, 3, 2), (32, 3, 2))
    pyramid_layers: int = 2
    hidden_size: int = 128
    decoder_layers: int = 2
    attention_size: int = 128
    max_decode_frames: int = 600
    context_ms: float = 200.0
    attention_form: str = "additive"

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        if self.n_styles < 1:
            raise InvalidInputError("n_styles must be >= 1")
        if self.attention_form not in ATTENTION_FORMS:
            raise InvalidInputError(
                f"attention_form must be one of {ATTENTION_FORMS}, "
                f"got {self.attention_form!r}"
            )
        reduction = self.reduction_factor
        expected = self.context_ms / 12.5
        if abs(reduction - expected) > 1e-9:
            raise InvalidInputError(
                f"temporal reduction {reduction} (conv strides x 2^pyramid) does "
                f"not match context_ms {self.context_ms} / 12.5 ms hop"
            )

    @property
    def stride_product(self) -> int:
        out = 1
        for _, _, stride in self.conv_layers:
            out *= stride
        return out

    @property
    def reduction_factor(self) -> int:
        return self.stride_product * 2**self.pyramid_layers

    @classmethod
    def for_context(cls, context_ms: float, n_styles: int,
                    **overrides) -> "ModelConfig":
        """Standard layout for one of the supported context sizes."""
        if context_ms not in _CONTEXT_LAYOUTS:
            raise InvalidInputError(
                f"context_ms must be one of {sorted(_CONTEXT_LAYOUTS)}, got {context_ms}"
            )
        strides, pyramid = _CONTEXT_LAYOUTS[context_ms]
        channels = overrides.pop("conv_channels", 32)
        conv = tuple((channels, 3, s) for s in strides)
        return cls(n_styles=n_styles, conv_layers=conv, pyramid_layers=pyramid,
                   context_ms=context_ms, **overrides)

    def encoder_output_length(self, n_frames: int) -> int:
        """Closed form of the temporal reduction: SAME convs then halvings."""
        length = n_frames
        for _, _, stride in self.conv_layers:
            length = -(-length // stride)
        for _ in range(self.pyramid_layers):
            length = -(-length // 2)
        return length

    def to_dict(self) -> dict:
        return {
            "n_styles": self.n_styles,
            "n_mels": self.n_mels,
            "conv_layers": [list(layer) for layer in self.conv_layers],
            "pyramid_layers": self.pyramid_layers,
            "hidden_size": self.hidden_size,
            "decoder_layers": self.decoder_layers,
            "attention_size": self.attention_size,
            "max_decode_frames": self.max_decode_frames,
            "context_ms": self.context_ms,
            "attention_form": self.attention_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_layers"] = tuple(tuple(layer) for layer in d["conv_layers"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return (q * np.sign(np.diag(r))).astype(dtype)


def _lstm_weights(rng, in_dim: int, hidden: int, dtype):
    """(wx, wh, b) for one LSTM layer: glorot per gate block, orthogonal
    recurrence, zero biases except forget-gate +1."""
    wx = np.concatenate(
        [glorot_uniform(rng, in_dim, hidden, (in_dim, hidden), dtype)
         for _ in range(4)], axis=1)
    wh = np.concatenate([orthogonal(rng, hidden, dtype) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden : 2 * hidden] = 1.0
    return wx, wh, b


class ModelParams:
    """Named learnable tensors plus the config that shaped them."""

    def __init__(self, cfg: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0,
                   dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors: "OrderedDict[str, Tensor]" = OrderedDict()

        def param(name, values):
            tensors[name] = Tensor(values, requires_grad=True, dtype=dtype)

        in_ch = cfg.n_mels
        for idx, (channels, kernel, _) in enumerate(cfg.conv_layers):
            param(f"conv{idx}_w", glorot_uniform(rng, kernel * in_ch, channels,
                                                 (kernel * in_ch, channels), dtype))
            param(f"conv{idx}_b", np.zeros(channels, dtype=dtype))
            in_ch = channels

        hidden = cfg.hidden_size
        enc_in = in_ch + cfg.n_styles
        for layer in range(cfg.pyramid_layers + 1):
            d = enc_in if layer == 0 else 2 * hidden
            wx, wh, b = _lstm_weights(rng, d, hidden, dtype)
            param(f"enc_lstm{layer}_wx", wx)
            param(f"enc_lstm{layer}_wh", wh)
            param(f"enc_lstm{layer}_b", b)

        bridge_out = 2 * hidden * cfg.decoder_layers
        param("bridge_w", glorot_uniform(rng, hidden, bridge_out,
                                         (hidden, bridge_out), dtype))
        param("bridge_b", np.zeros(bridge_out, dtype=dtype))

        dec_in = cfg.n_mels + hidden + cfg.n_styles
        for layer in range(cfg.decoder_layers):
            d = dec_in if layer == 0 else hidden
            wx, wh, b = _lstm_weights(rng, d, hidden, dtype)
            param(f"dec_lstm{layer}_wx", wx)
            param(f"dec_lstm{layer}_wh", wh)
            param(f"dec_lstm{layer}_b", b)

        att = cfg.attention_size
        if cfg.attention_form == "additive":
            param("att_query_w", glorot_uniform(rng, hidden, att, (hidden, att), dtype))
            param("att_key_w", glorot_uniform(rng, hidden, att, (hidden, att), dtype))
            param("att_b", np.zeros(att, dtype=dtype))
            param("att_score_w", glorot_uniform(rng, att, 1, (att, 1), dtype))
        else:
            param("att_query_mlp_w", glorot_uniform(rng, hidden, att, (hidden, att), dtype))
            param("att_query_mlp_b", np.zeros(att, dtype=dtype))
            param("att_key_mlp_w", glorot_uniform(rng, hidden, att, (hidden, att), dtype))
            param("att_key_mlp_b", np.zeros(att, dtype=dtype))

        param("out_w", glorot_uniform(rng, 2 * hidden, cfg.n_mels,
                                      (2 * hidden, cfg.n_mels), dtype))
        param("out_b", np.zeros(cfg.n_mels, dtype=dtype))
        return cls(cfg, tensors)

    @classmethod
    def from_arrays(cls, cfg: ModelConfig,
                    arrays: "OrderedDict[str, np.ndarray]") -> "ModelParams":
        tensors = OrderedDict(
            (name, Tensor(values, requires_grad=True)) for name, values in arrays.items()
        )
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def trainable(self) -> List[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# graph builders (batched)
# ---------------------------------------------------------------------------

def _normalize_frames(frames: np.ndarray, dtype) -> np.ndarray:
    return ((frames - INPUT_CENTER) / INPUT_SCALE).astype(dtype)


def _denormalize(frame: Tensor, dtype) -> Tensor:
    """Map a normalized-space emission back to raw log-mel.  Projecting in
    normalized space keeps the zero-initialized output near real frame
    levels, so optimization starts well conditioned."""
    return ad.add(ad.scale(frame, INPUT_SCALE),
                  Tensor(np.asarray(INPUT_CENTER, dtype=dtype)))


def _one_hot(style_ids, n_styles: int, dtype) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(style_ids, dtype=np.int64))
    if np.any(ids < 0) or np.any(ids >= n_styles):
        bad = ids[(ids < 0) | (ids >= n_styles)][0]
        raise UnseenStyleError(
            f"style id {bad} outside the {n_styles}-style vocabulary"
        )
    out = np.zeros((len(ids), n_styles), dtype=dtype)
    out[np.arange(len(ids)), ids] = 1.0
    return out


def _trivial_mask(mask: Optional[np.ndarray]) -> bool:
    return mask is None or bool(np.all(mask >= 0.5))


def _conv_frontend(params: ModelParams, x: Tensor,
                   mask: Optional[np.ndarray]) -> Tuple[Tensor, Optional[np.ndarray]]:
    """SAME-padded strided time convolutions with relu; x is (B, T, C)."""
    cfg = params.cfg
    for idx, (channels, kernel, stride) in enumerate(cfg.conv_layers):
        n_frames = x.shape[1]
        out_len = -(-n_frames // stride)
        pad_total = max((out_len - 1) * stride + kernel - n_frames, 0)
        pad_left = pad_total // 2
        if pad_total:
            x = ad.pad_axis(x, 1, pad_left, pad_total - pad_left)
        taps = [
            x[:, j : j + stride * (out_len - 1) + 1 : stride, :]
            for j in range(kernel)
        ]
        stacked = ad.concat(taps, axis=-1)
        x = ad.relu(ad.add(ad.matmul(stacked, params[f"conv{idx}_w"]),
                           params[f"conv{idx}_b"]))
        if mask is not None:
            mask = mask[:, ::stride]
    return x, mask


def _lstm_layer(params: ModelParams, layer_name: str, x: Tensor,
                mask: Optional[np.ndarray]) -> Tensor:
    """Run one unidirectional LSTM layer over (B, T, D); returns (B, T, H).

    With a padding mask, state updates are blended so padded steps freeze the
    running state, which keeps the final hidden state equal to the state at
    each sequence's true end.
    """
    cfg = params.cfg
    hidden = cfg.hidden_size
    wx = params[f"{layer_name}_wx"]
    wh = params[f"{layer_name}_wh"]
    b = params[f"{layer_name}_b"]
    batch, n_frames = x.shape[0], x.shape[1]
    dtype = x.dtype

    pre_all = ad.add(ad.matmul(x, wx), b)
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    blend = not _trivial_mask(mask)
    outputs = []
    for t in range(n_frames):
        pre = ad.add(pre_all[:, t, :], ad.matmul(h, wh))
        hc = ad.lstm_gates(pre, c)
        h_new = hc[:, :hidden]
        c_new = hc[:, hidden:]
        if blend:
            m = Tensor(mask[:, t : t + 1].astype(dtype))
            keep = Tensor((1.0 - mask[:, t : t + 1]).astype(dtype))
            h = ad.add(ad.mul(h_new, m), ad.mul(h, keep))
            c = ad.add(ad.mul(c_new, m), ad.mul(c, keep))
        else:
            h, c = h_new, c_new
        outputs.append(ad.reshape(h, (batch, 1, hidden)))
    return ad.concat(outputs, axis=1)


def _pyramid_reduce(h: Tensor) -> Tensor:
    """Concatenate adjacent pairs along time, halving the length (odd tails
    are zero-padded)."""
    n_frames = h.shape[1]
    if n_frames % 2:
        h = ad.pad_axis(h, 1, 0, 1)
    even = h[:, 0::2, :]
    odd = h[:, 1::2, :]
    return ad.concat([even, odd], axis=-1)


def encode_batch(params: ModelParams, frames: np.ndarray, style_ids,
                 mask: Optional[np.ndarray] = None,
                 ) -> Tuple[Tensor, Optional[np.ndarray], Tensor]:
    """Encode a (B, T, n_mels) log-mel batch.

    Returns (hidden sequence (B, L, H), reduced mask or None, final state
    (B, H)).  The final state doubles as the clip embedding.
    """
    cfg = params.cfg
    if frames.ndim != 3 or frames.shape[2] != cfg.n_mels:
        raise ShapeError(f"encode expects (B, T, {cfg.n_mels}), got {frames.shape}")
    if frames.shape[1] < cfg.reduction_factor:
        raise InvalidInputError(
            f"input of {frames.shape[1]} frames is shorter than the temporal "
            f"reduction factor {cfg.reduction_factor}"
        )
    dtype = params.dtype
    x = Tensor(_normalize_frames(frames, dtype))
    x, mask = _conv_frontend(params, x, mask)

    onehot = _one_hot(style_ids, cfg.n_styles, dtype)
    tiled = np.broadcast_to(onehot[:, None, :],
                            (x.shape[0], x.shape[1], cfg.n_styles)).copy()
    x = ad.concat([x, Tensor(tiled)], axis=-1)

    x = _lstm_layer(params, "enc_lstm0", x, mask)
    for layer in range(1, cfg.pyramid_layers + 1):
        x = _pyramid_reduce(x)
        if mask is not None:
            mask = mask[:, ::2]
        x = _lstm_layer(params, f"enc_lstm{layer}", x, mask)
    final = x[:, -1, :]
    return x, mask, final


def _attention_keys(params: ModelParams, enc_h: Tensor) -> Tensor:
    """Per-decode precomputation of the encoder-side attention terms."""
    if params.cfg.attention_form == "additive":
        return ad.add(ad.matmul(enc_h, params["att_key_w"]), params["att_b"])
    return ad.tanh(ad.add(ad.matmul(enc_h, params["att_key_mlp_w"]),
                          params["att_key_mlp_b"]))


def _attend(params: ModelParams, s_prev: Tensor, enc_h: Tensor, keys: Tensor,
            bias: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
    """Attention weights and context from the pre-update decoder state."""
    cfg = params.cfg
    batch, enc_len = enc_h.shape[0], enc_h.shape[1]
    if enc_len == 0:
        raise InvalidInputError("attention over an empty encoder sequence")
    if cfg.attention_form == "additive":
        query = ad.matmul(s_prev, params["att_query_w"])
        query = ad.reshape(query, (batch, 1, cfg.attention_size))
        scores = ad.matmul(ad.tanh(ad.add(keys, query)), params["att_score_w"])
    else:
        query = ad.tanh(ad.add(ad.matmul(s_prev, params["att_query_mlp_w"]),
                               params["att_query_mlp_b"]))
        query = ad.reshape(query, (batch, cfg.attention_size, 1))
        scores = ad.matmul(keys, query)
    scores = ad.reshape(scores, (batch, enc_len))
    if bias is not None:
        scores = ad.add(scores, bias)
    alpha = ad.softmax(scores, axis=-1)
    context = ad.matmul(ad.reshape(alpha, (batch, 1, enc_len)), enc_h)
    return alpha, ad.reshape(context, (batch, cfg.hidden_size))


def _decoder_initial_states(params: ModelParams,
                            enc_final: Tensor) -> List[Tuple[Tensor, Tensor]]:
    """Learned linear bridge from the encoder final state to every decoder
    layer's initial (h, c)."""
    cfg = params.cfg
    hidden = cfg.hidden_size
    bridge = ad.tanh(ad.add(ad.matmul(enc_final, params["bridge_w"]),
                            params["bridge_b"]))
    states = []
    for layer in range(cfg.decoder_layers):
        offset = 2 * hidden * layer
        h = bridge[:, offset : offset + hidden]
        c = bridge[:, offset + hidden : offset + 2 * hidden]
        states.append((h, c))
    return states


def _decoder_cell(params: ModelParams, inp: Tensor,
                  states: Sequence[Tuple[Tensor, Tensor]],
                  ) -> Tuple[List[Tuple[Tensor, Tensor]], Tensor]:
    cfg = params.cfg
    hidden = cfg.hidden_size
    x = inp
    new_states = []
    for layer, (h, c) in enumerate(states):
        pre = ad.add(ad.add(ad.matmul(x, params[f"dec_lstm{layer}_wx"]),
                            params[f"dec_lstm{layer}_b"]),
                     ad.matmul(h, params[f"dec_lstm{layer}_wh"]))
        hc = ad.lstm_gates(pre, c)
        h_new = hc[:, :hidden]
        c_new = hc[:, hidden:]
        new_states.append((h_new, c_new))
        x = h_new
    return new_states, x


def _attention_bias(mask: Optional[np.ndarray], dtype) -> Optional[Tensor]:
    if _trivial_mask(mask):
        return None
    return Tensor(((1.0 - mask) * -1e9).astype(dtype))


def decode_teacher_batch(params: ModelParams, enc_h: Tensor,
                         enc_mask: Optional[np.ndarray], enc_final: Tensor,
                         targets: np.ndarray, target_styles,
                         sample_prob: float = 0.0,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """Teacher-forced decode: step t consumes ground-truth frame t-1 (the
    all-zero go frame at t=0) and emits frame t.  Returns (B, T, n_mels).

    With sample_prob > 0, each example independently feeds back its own
    previous emission instead of the teacher frame with that probability
    (scheduled sampling), which closes the train/inference feedback gap.
    Gradients flow through the sampled frames.
    """
    cfg = params.cfg
    dtype = params.dtype
    if not 0.0 <= sample_prob <= 1.0:
        raise InvalidInputError(f"sample_prob must be in [0, 1], got {sample_prob}")
    if sample_prob > 0.0 and rng is None:
        raise InvalidInputError("sample_prob > 0 requires an rng")
    batch, n_frames = targets.shape[0], targets.shape[1]
    onehot = Tensor(_one_hot(target_styles, cfg.n_styles, dtype))
    teacher = _normalize_frames(targets, dtype)

    keys = _attention_keys(params, enc_h)
    bias = _attention_bias(enc_mask, dtype)
    states = _decoder_initial_states(params, enc_final)
    context = Tensor(np.zeros((batch, cfg.hidden_size), dtype=dtype))
    outputs = []
    prev_norm = None
    for t in range(n_frames):
        if t == 0:
            y_prev = Tensor(np.zeros((batch, cfg.n_mels), dtype=dtype))
        else:
            y_prev = Tensor(teacher[:, t - 1, :])
            if sample_prob > 0.0:
                take_own = (rng.random(batch) < sample_prob).astype(dtype)
                if take_own.any():
                    m = Tensor(take_own[:, None])
                    y_prev = ad.add(ad.mul(prev_norm, m),
                                    ad.mul(y_prev, Tensor(1.0 - m.data)))
        alpha, new_context = _attend(params, states[-1][0], enc_h, keys, bias)
        inp = ad.concat([y_prev, context, onehot], axis=-1)
        states, top = _decoder_cell(params, inp, states)
        norm_frame = ad.add(ad.matmul(ad.concat([top, new_context], axis=-1),
                                      params["out_w"]), params["out_b"])
        frame = _denormalize(norm_frame, dtype)
        outputs.append(ad.reshape(frame, (batch, 1, cfg.n_mels)))
        prev_norm = norm_frame
        context = new_context
    return ad.concat(outputs, axis=1)


def loss_on_batch(params: ModelParams, batch: dict, sample_prob: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Teacher-forced MSE over unmasked target frames.

    batch: src (B,Ts,M), src_mask (B,Ts) or None, src_styles, tgt (B,Tt,M),
    tgt_mask (B,Tt) or None, tgt_styles.  Padded frames contribute nothing,
    so extending the padding leaves the value unchanged.  sample_prob/rng
    enable scheduled sampling in the decoder.
    """
    src = np.asarray(batch["src"])
    tgt = np.asarray(batch["tgt"])
    if src.size == 0 or tgt.size == 0 or src.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if src.shape[0] != tgt.shape[0]:
        raise ShapeError(f"batch size mismatch: {src.shape[0]} sources vs "
                         f"{tgt.shape[0]} targets")
    dtype = params.dtype
    enc_h, enc_mask, enc_final = encode_batch(
        params, src, batch["src_styles"], batch.get("src_mask"))
    pred = decode_teacher_batch(params, enc_h, enc_mask, enc_final,
                                tgt, batch["tgt_styles"],
                                sample_prob=sample_prob, rng=rng)

    tgt_mask = batch.get("tgt_mask")
    diff = ad.sub(pred, Tensor(tgt.astype(dtype)))
    if not _trivial_mask(tgt_mask):
        diff = ad.mul(diff, Tensor(tgt_mask[:, :, None].astype(dtype)))
        n_frames = float(np.sum(tgt_mask))
    else:
        n_frames = float(tgt.shape[0] * tgt.shape[1])
    total = ad.tensor_sum(ad.mul(diff, diff))
    return ad.scale(total, 1.0 / (n_frames * params.cfg.n_mels))


# ---------------------------------------------------------------------------
# single-example wrappers (inference / oracle path)
# ---------------------------------------------------------------------------

@dataclass
class EncoderState:
    """Encoder hidden sequence and the final-state clip embedding."""

    hidden: np.ndarray  # (L, hidden_size)
    final: np.ndarray  # (hidden_size,)


@dataclass
class DecoderState:
    """Per-layer (h, c) pairs."""

    layers: List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class DecoderStep:
    """One decode step: new state, context, attention row, emitted frame."""

    state: DecoderState
    context: np.ndarray  # (hidden_size,)
    alpha: np.ndarray  # (L,)
    frame: np.ndarray  # (n_mels,)


def _spec_frames(spec) -> np.ndarray:
    if isinstance(spec, Spectrogram):
        if spec.scale != SCALE_LOG_MEL:
            raise InvalidInputError(f"model operates on log_mel input, got {spec.scale}")
        return spec.frames
    return np.asarray(spec)


def encode(params: ModelParams, spec, source_style: int) -> EncoderState:
    """Encode one clip; returns the hidden sequence and the clip embedding."""
    frames = _spec_frames(spec)
    with ad.no_grad():
        h, _, final = encode_batch(params, frames[None, :, :], [source_style])
    return EncoderState(hidden=h.data[0], final=final.data[0])


def attend(params: ModelParams, s_prev: np.ndarray,
           enc_hidden: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Attention weights over encoder steps and the resulting context."""
    with ad.no_grad():
        h = Tensor(np.asarray(enc_hidden, dtype=params.dtype)[None, :, :])
        s = Tensor(np.asarray(s_prev, dtype=params.dtype)[None, :])
        alpha, context = _attend(params, s, h, _attention_keys(params, h), None)
    return alpha.data[0], context.data[0]


def initial_decoder_state(params: ModelParams, enc: EncoderState) -> DecoderState:
    with ad.no_grad():
        states = _decoder_initial_states(
            params, Tensor(enc.final[None, :].astype(params.dtype)))
        return DecoderState([(h.data[0], c.data[0]) for h, c in states])


def decode_step(params: ModelParams, state: DecoderState,
                context: Optional[np.ndarray], enc: EncoderState,
                target_style: int,
                y_prev: Optional[np.ndarray] = None) -> DecoderStep:
    """One decoder step.  y_prev=None means the all-zero go frame; context
    None means the zero initial context."""
    cfg = params.cfg
    dtype = params.dtype
    with ad.no_grad():
        h = Tensor(enc.hidden[None, :, :].astype(dtype))
        keys = _attention_keys(params, h)
        onehot = Tensor(_one_hot([target_style], cfg.n_styles, dtype))
        if y_prev is None:
            prev = Tensor(np.zeros((1, cfg.n_mels), dtype=dtype))
        else:
            prev = Tensor(_normalize_frames(np.asarray(y_prev), dtype)[None, :])
        if context is None:
            context_t = Tensor(np.zeros((1, cfg.hidden_size), dtype=dtype))
        else:
            context_t = Tensor(np.asarray(context, dtype=dtype)[None, :])
        states = [
            (Tensor(sh[None, :].astype(dtype)), Tensor(sc[None, :].astype(dtype)))
            for sh, sc in state.layers
        ]
        alpha, new_context = _attend(params, states[-1][0], h, keys, None)
        inp = ad.concat([prev, context_t, onehot], axis=-1)
        states, top = _decoder_cell(params, inp, states)
        frame = _denormalize(
            ad.add(ad.matmul(ad.concat([top, new_context], axis=-1),
                             params["out_w"]), params["out_b"]), dtype)
    return DecoderStep(
        state=DecoderState([(sh.data[0], sc.data[0]) for sh, sc in states]),
        context=new_context.data[0],
        alpha=alpha.data[0],
        frame=frame.data[0],
    )


def _trim_trailing_silence(frames: np.ndarray) -> np.ndarray:
    keep = len(frames)
    while keep > 1 and float(frames[keep - 1].mean()) < SILENCE_THRESHOLD:
        keep -= 1
    return frames[:keep]


def transform(params: ModelParams, spec, source_style: int, target_style: int,
              max_frames: Optional[int] = None,
              trim_silence: bool = True) -> Tuple[Spectrogram, np.ndarray]:
    """Free-running conditioned transform of one clip.

    Emissions feed back as the next y_prev for up to max_frames steps
    (default 1.2x the source length, capped by the config), then trailing
    near-silent frames are trimmed.  Returns the log-mel prediction and the
    (emitted_frames, encoder_length) attention matrix.
    """
    frames = _spec_frames(spec)
    cfg = params.cfg
    if max_frames is None:
        max_frames = min(cfg.max_decode_frames, max(1, round(1.2 * len(frames))))
    if max_frames < 1:
        raise InvalidInputError(f"max_frames must be >= 1, got {max_frames}")
    enc = encode(params, frames, source_style)
    state = initial_decoder_state(params, enc)
    context = None
    y_prev = None
    emitted = []
    alphas = []
    for _ in range(max_frames):
        step = decode_step(params, state, context, enc, target_style, y_prev)
        emitted.append(step.frame)
        alphas.append(step.alpha)
        state, context, y_prev = step.state, step.context, step.frame
    out = np.stack(emitted)
    if trim_silence:
        out = _trim_trailing_silence(out)
    attention = np.stack(alphas)[: len(out)]
    cfg_src = spec.config if isinstance(spec, Spectrogram) else None
    return Spectrogram(out, SCALE_LOG_MEL, cfg_src), attention
