"""Training loop, evaluation, context ablation, and embedding export."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from audiomorph import autodiff as ad
from audiomorph import data as data_mod
from audiomorph import formats, model as model_mod
from audiomorph.data import ClipFeatures, FeatureConfig, TransferPair
from audiomorph.dsp import SCALE_LOG_MEL, Spectrogram, mcd
from audiomorph.errors import (
    InvalidInputError,
    TrainingDivergedError,
    UnseenStyleError,
)
from audiomorph.model import ModelConfig, ModelParams

log = logging.getLogger("audiomorph.train")

CHECKPOINT_LAST = "checkpoint_last.amckpt"
CHECKPOINT_FINAL = "checkpoint_final.amckpt"
CHECKPOINT_AVG = "checkpoint_avg.amckpt"
LOSS_CSV = "losses.csv"


@dataclass
class TrainConfig:
    """Optimization harness settings (architecture lives in ModelConfig)."""

    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.99
    identity_epochs: int = 0
    mel_jitter: int = 0
    sample_prob: float = 0.0
    average_tail: int = 0
    seed: int = 7

    def __post_init__(self):
        if self.mel_jitter < 0:
            raise InvalidInputError(f"mel_jitter must be >= 0, got {self.mel_jitter}")
        if not 0.0 <= self.sample_prob <= 1.0:
            raise InvalidInputError(
                f"sample_prob must be in [0, 1], got {self.sample_prob}")
        if self.average_tail < 0:
            raise InvalidInputError(
                f"average_tail must be >= 0, got {self.average_tail}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "identity_epochs": self.identity_epochs,
            "mel_jitter": self.mel_jitter,
            "sample_prob": self.sample_prob,
            "average_tail": self.average_tail,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint_path: Path
    final_loss: float
    epochs_run: int
    wall_time_s: float
    loss_csv: Path


def _save(run_dir: Path, name: str, params: ModelParams, opt: ad.Adam,
          style_names: List[str], feature_cfg: FeatureConfig,
          train_cfg: TrainConfig, epoch: int) -> Path:
    arch = {
        "model": params.cfg.to_dict(),
        "features": feature_cfg.to_dict(),
        "style_names": style_names,
    }
    extra = {"epoch": epoch, "train_config": train_cfg.to_dict()}
    path = run_dir / name
    formats.save_checkpoint(path, arch, params.tensors,
                            optimizer_state=opt.state_dict(),
                            optimizer_moments=(opt.m, opt.v), extra=extra)
    return path


def load_model(checkpoint_path) -> Tuple[ModelParams, FeatureConfig, List[str], dict]:
    """Rebuild (params, feature config, style names, extra) from a checkpoint."""
    ckpt = formats.load_checkpoint(checkpoint_path)
    cfg = ModelConfig.from_dict(ckpt["arch"]["model"])
    params = ModelParams.from_arrays(cfg, ckpt["params"])
    feature_cfg = FeatureConfig.from_dict(ckpt["arch"]["features"])
    return params, feature_cfg, list(ckpt["arch"]["style_names"]), ckpt


def train(run_dir, manifest_path, model_cfg: ModelConfig,
          feature_cfg: FeatureConfig, train_cfg: TrainConfig,
          resume: bool = False, cache_dir=None) -> TrainResult:
    """Teacher-forced MSE training over all cross-style pairs.

    The optional identity phase (identity_epochs > 0) first trains on
    (clip, clip) pairs, which gives attention an easy monotonic alignment
    before the harder transfer objective.  mel_jitter and sample_prob add
    mel-roll augmentation and scheduled sampling; average_tail > 0 saves the
    mean of the last that many epochs' weights as the final checkpoint
    (tail averaging), which generalizes noticeably better on small corpora.
    Checkpoints land in run_dir after every epoch; a non-finite loss aborts
    with the last finished epoch's checkpoint intact.  Reruns with the same
    configs are bit-identical.
    """
    t0 = time.perf_counter()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    clips = data_mod.load_features(manifest_path, feature_cfg, split="train",
                                   cache_dir=cache_dir)
    if not clips:
        raise InvalidInputError("manifest has no training clips")
    style_names = _style_names(clips)
    if len(style_names) > model_cfg.n_styles:
        raise InvalidInputError(
            f"{len(style_names)} styles in corpus exceed model n_styles="
            f"{model_cfg.n_styles}"
        )
    transfer = data_mod.build_pairs(clips)
    identity = data_mod.identity_pairs(clips)
    if not transfer:
        raise InvalidInputError("no transfer pairs in the training split")

    params = ModelParams.initialize(model_cfg, seed=train_cfg.seed)
    opt = ad.Adam(params.trainable(), learning_rate=train_cfg.learning_rate,
                  decay_per_epoch=train_cfg.lr_decay)
    start_epoch = 0
    total_epochs = train_cfg.identity_epochs + train_cfg.epochs

    last_path = run_dir / CHECKPOINT_LAST
    avg_path = run_dir / CHECKPOINT_AVG
    loss_csv = run_dir / LOSS_CSV
    avg_start = max(0, total_epochs - train_cfg.average_tail)
    avg_sum: Optional[Dict[str, np.ndarray]] = None
    n_avg = 0
    if resume and last_path.exists():
        params, _, _, ckpt = load_model(last_path)
        opt = ad.Adam(params.trainable(), learning_rate=train_cfg.learning_rate,
                      decay_per_epoch=train_cfg.lr_decay)
        opt.load_state_dict(ckpt["optimizer"], ckpt["moments"])
        start_epoch = int(ckpt["extra"]["epoch"]) + 1
        if avg_path.exists():
            avg_ckpt = formats.load_checkpoint(avg_path)
            stored_start = int(avg_ckpt["extra"].get("avg_start", -1))
            if stored_start == avg_start:
                avg_sum = dict(avg_ckpt["params"])
                n_avg = int(avg_ckpt["extra"]["n_avg"])
            else:
                log.warning(
                    "discarding averaged weights (window started at epoch "
                    "%d, current config starts at %d)", stored_start,
                    avg_start)
        elif train_cfg.average_tail and start_epoch > avg_start:
            log.warning("no averaged weights on disk; averaging restarts "
                        "at epoch %d instead of %d", start_epoch, avg_start)
        log.info("resuming at epoch %d", start_epoch)
    else:
        if loss_csv.exists():
            loss_csv.unlink()
        if avg_path.exists():
            avg_path.unlink()

    if not loss_csv.exists():
        with open(loss_csv, "w", newline="") as fh:
            csv.writer(fh).writerow(["phase", "epoch", "step", "loss", "lr"])

    final_loss = float("nan")
    for epoch in range(start_epoch, total_epochs):
        in_identity = epoch < train_cfg.identity_epochs
        phase = "identity" if in_identity else "transfer"
        pairs = identity if in_identity else transfer
        jitter_rng = np.random.default_rng([train_cfg.seed, 2, epoch])
        sample_rng = np.random.default_rng([train_cfg.seed, 3, epoch])
        epoch_losses = []
        rows = []
        for step, batch in enumerate(
                data_mod.batch_iterator(pairs, train_cfg.batch_size,
                                        train_cfg.seed, epoch)):
            if train_cfg.mel_jitter:
                batch = data_mod.mel_jitter_batch(batch, train_cfg.mel_jitter,
                                                  jitter_rng)
            loss = model_mod.loss_on_batch(params, batch,
                                           sample_prob=train_cfg.sample_prob,
                                           rng=sample_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                log.error("non-finite loss at epoch %d step %d", epoch, step)
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch} step {step}; "
                    f"last good checkpoint: "
                    f"{last_path if last_path.exists() else 'none'}"
                )
            opt.zero_grads()
            ad.backward(loss)
            opt.step()
            epoch_losses.append(value)
            rows.append([phase, epoch, step, f"{value:.8f}",
                         f"{opt.learning_rate:.8g}"])
        opt.decay_learning_rate()
        with open(loss_csv, "a", newline="") as fh:
            csv.writer(fh).writerows(rows)
        final_loss = float(np.mean(epoch_losses))
        log.info("epoch %d (%s): mean loss %.6f", epoch, phase, final_loss)
        _save(run_dir, CHECKPOINT_LAST, params, opt, style_names, feature_cfg,
              train_cfg, epoch)
        if train_cfg.average_tail and epoch >= avg_start:
            if avg_sum is None:
                avg_sum = {k: t.data.copy() for k, t in params.tensors.items()}
            else:
                for k, t in params.tensors.items():
                    avg_sum[k] = avg_sum[k] + t.data
            n_avg += 1
            formats.save_checkpoint(
                avg_path, {"model": model_cfg.to_dict()}, avg_sum,
                extra={"n_avg": n_avg, "avg_start": avg_start})

    if train_cfg.average_tail and n_avg > 0:
        averaged = {k: (v / n_avg).astype(params.dtype)
                    for k, v in avg_sum.items()}
        params = ModelParams.from_arrays(model_cfg, averaged)
    final_path = _save(run_dir, CHECKPOINT_FINAL, params, opt, style_names,
                       feature_cfg, train_cfg, total_epochs - 1)
    return TrainResult(
        checkpoint_path=final_path,
        final_loss=final_loss,
        epochs_run=total_epochs - start_epoch,
        wall_time_s=time.perf_counter() - t0,
        loss_csv=loss_csv,
    )


def _style_names(clips: Sequence[ClipFeatures]) -> List[str]:
    names: Dict[int, str] = {}
    for clip in clips:
        names[clip.entry.style_id] = clip.entry.style_name
    return [names[i] for i in sorted(names)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-pair and aggregate MCD for the model and two reference baselines."""

    n_pairs: int
    model_mcd: Dict[str, float]
    identity_mcd: Dict[str, float]
    mean_frame_mcd: Dict[str, float]
    per_pair: List[dict]
    wall_time_s: float

    def to_json(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "model_mcd": self.model_mcd,
            "identity_baseline_mcd": self.identity_mcd,
            "mean_frame_baseline_mcd": self.mean_frame_mcd,
            "per_pair": self.per_pair,
            "wall_time_s": self.wall_time_s,
        }


def style_mean_frames(train_clips: Sequence[ClipFeatures]) -> Dict[int, np.ndarray]:
    """Per-style mean log-mel frame over the training split; the constant
    predictor a conditioned model must beat."""
    frames: Dict[int, List[np.ndarray]] = {}
    for clip in train_clips:
        frames.setdefault(clip.entry.style_id, []).append(clip.frames)
    return {
        style: np.concatenate(group, axis=0).mean(axis=0)
        for style, group in frames.items()
    }


def _pair_metrics(params: ModelParams, pair: TransferPair,
                  mean_frames: Dict[int, np.ndarray]) -> dict:
    tgt = pair.tgt.frames.astype(np.float64)
    pred_spec, _ = model_mod.transform(
        params, pair.src.frames, pair.src.entry.style_id,
        pair.tgt.entry.style_id, trim_silence=False)
    pred = pred_spec.frames.astype(np.float64)

    n = min(len(pred), len(tgt))
    tgt_t = Spectrogram(tgt[:n], SCALE_LOG_MEL)
    out = {
        "src": pair.src.entry.clip_id,
        "tgt": pair.tgt.entry.clip_id,
        "n_frames": n,
    }
    out["model_paper"] = mcd(tgt_t, Spectrogram(pred[:n], SCALE_LOG_MEL), "paper")
    out["model_per_frame"] = mcd(tgt_t, Spectrogram(pred[:n], SCALE_LOG_MEL),
                                 "per_frame")

    src = pair.src.frames.astype(np.float64)
    m = min(len(src), len(tgt))
    tgt_m = Spectrogram(tgt[:m], SCALE_LOG_MEL)
    out["identity_paper"] = mcd(tgt_m, Spectrogram(src[:m], SCALE_LOG_MEL), "paper")
    out["identity_per_frame"] = mcd(tgt_m, Spectrogram(src[:m], SCALE_LOG_MEL),
                                    "per_frame")

    const = np.broadcast_to(mean_frames[pair.tgt.entry.style_id],
                            (len(tgt), tgt.shape[1]))
    tgt_full = Spectrogram(tgt, SCALE_LOG_MEL)
    out["mean_frame_paper"] = mcd(tgt_full, Spectrogram(const, SCALE_LOG_MEL),
                                  "paper")
    out["mean_frame_per_frame"] = mcd(
        tgt_full, Spectrogram(const, SCALE_LOG_MEL), "per_frame")
    return out


def evaluate(params: ModelParams, eval_clips: Sequence[ClipFeatures],
             train_clips: Sequence[ClipFeatures], jobs: int = 1) -> EvalReport:
    """Transform every cross-style pair in eval_clips and score MCD against
    the ground-truth target, alongside identity (source-as-prediction) and
    per-style mean-frame baselines computed from train_clips."""
    t0 = time.perf_counter()
    for clip in eval_clips:
        if clip.entry.style_id >= params.cfg.n_styles:
            raise UnseenStyleError(
                f"clip {clip.entry.clip_id} has style id {clip.entry.style_id} "
                f"outside the {params.cfg.n_styles}-style vocabulary"
            )
    pairs = data_mod.build_pairs(eval_clips)
    if not pairs:
        raise InvalidInputError("no cross-style pairs to evaluate")
    mean_frames = style_mean_frames(train_clips)
    for pair in pairs:
        if pair.tgt.entry.style_id not in mean_frames:
            raise InvalidInputError(
                f"style {pair.tgt.entry.style_name} absent from the training "
                f"split; mean-frame baseline undefined"
            )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_pair = list(pool.map(
                lambda p: _pair_metrics(params, p, mean_frames), pairs))
    else:
        per_pair = [_pair_metrics(params, p, mean_frames) for p in pairs]

    def agg(prefix: str) -> Dict[str, float]:
        return {
            "paper": float(np.mean([r[f"{prefix}_paper"] for r in per_pair])),
            "per_frame": float(np.mean([r[f"{prefix}_per_frame"] for r in per_pair])),
        }

    return EvalReport(
        n_pairs=len(pairs),
        model_mcd=agg("model"),
        identity_mcd=agg("identity"),
        mean_frame_mcd=agg("mean_frame"),
        per_pair=per_pair,
        wall_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# context ablation
# ---------------------------------------------------------------------------

ABLATION_CONTEXTS = (12.5, 25.0, 50.0, 100.0, 200.0)


def ablate_context(work_dir, manifest_path, feature_cfg: FeatureConfig,
                   train_cfg: TrainConfig,
                   contexts: Sequence[float] = ABLATION_CONTEXTS,
                   model_overrides: Optional[dict] = None,
                   cache_dir=None, jobs: int = 1) -> List[dict]:
    """Train and evaluate one model per attention context size.

    Each run reuses the same corpus, seed, and harness settings, so rows
    differ only in the encoder's temporal reduction.  A failed context
    produces a row with NaN metrics instead of aborting the sweep.  Returns
    the rows and writes ablation.csv under work_dir.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    eval_clips = data_mod.load_features(manifest_path, feature_cfg,
                                        split="test", cache_dir=cache_dir)
    train_clips = data_mod.load_features(manifest_path, feature_cfg,
                                         split="train", cache_dir=cache_dir)
    n_styles = len({c.entry.style_id for c in train_clips})
    rows = []
    for context in contexts:
        row = {"context_ms": context, "mean_mcd": float("nan"),
               "ci95": float("nan"), "n_pairs": 0, "train_s": float("nan")}
        try:
            cfg = ModelConfig.for_context(context, n_styles=n_styles,
                                          **(model_overrides or {}))
            run_dir = work_dir / f"context_{context:g}ms"
            result = train(run_dir, manifest_path, cfg, feature_cfg, train_cfg,
                           cache_dir=cache_dir)
            params, _, _, _ = load_model(result.checkpoint_path)
            report = evaluate(params, eval_clips, train_clips, jobs=jobs)
            values = np.array([r["model_per_frame"] for r in report.per_pair])
            row["mean_mcd"] = float(values.mean())
            row["ci95"] = _ci95(values)
            row["n_pairs"] = len(values)
            row["train_s"] = round(result.wall_time_s, 3)
        except Exception:
            log.exception("ablation run failed for context %s ms", context)
        rows.append(row)

    # The CSV holds only the metrics so identical seeds give identical bytes;
    # wall time stays in the returned rows.
    with open(work_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["context_ms", "mean_mcd", "ci95", "n_pairs"],
            extrasaction="ignore")
        writer.writeheader()
        writer.writerows(
            {**r, "mean_mcd": f"{r['mean_mcd']:.6f}", "ci95": f"{r['ci95']:.6f}"}
            for r in rows)
    return rows


def _ci95(values: np.ndarray) -> float:
    """Half-width of the normal-approximation 95% confidence interval."""
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(len(values)))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def clip_embeddings(params: ModelParams,
                    clips: Sequence[ClipFeatures]) -> List[Tuple[ClipFeatures, np.ndarray]]:
    out = []
    for clip in clips:
        enc = model_mod.encode(params, clip.frames, clip.entry.style_id)
        out.append((clip, enc.final))
    return out


def export_embeddings(params: ModelParams, clips: Sequence[ClipFeatures],
                      path) -> int:
    """Write one TSV row per clip: content_id, style_id, then the encoder
    final-state vector."""
    rows = clip_embeddings(params, clips)
    with open(path, "w") as fh:
        dim = params.cfg.hidden_size
        header = ["content_id", "style_id"] + [f"h{i}" for i in range(dim)]
        fh.write("\t".join(header) + "\n")
        for clip, vec in rows:
            cells = [clip.entry.content_id, str(clip.entry.style_id)]
            cells += [f"{v:.7e}" for v in vec]
            fh.write("\t".join(cells) + "\n")
    return len(rows)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def embedding_separation(pairs: Sequence[Tuple[ClipFeatures, np.ndarray]]) -> dict:
    """Mean cosine distance between embeddings of the same pitch (across
    styles) vs different pitches.  Content-coding encoders give intra < inter."""
    intra, inter = [], []
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            d = cosine_distance(pairs[i][1], pairs[j][1])
            same = pairs[i][0].entry.midi_pitch == pairs[j][0].entry.midi_pitch
            (intra if same else inter).append(d)
    return {
        "intra_mean": float(np.mean(intra)) if intra else float("nan"),
        "inter_mean": float(np.mean(inter)) if inter else float("nan"),
        "n_intra": len(intra),
        "n_inter": len(inter),
    }
