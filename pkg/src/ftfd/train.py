"""Adam optimization, the training loop, and segment-level metrics.

Training samples one random window per clip per epoch, logs validation
metrics from one centered window per validation clip, and keeps the
checkpoint with the best validation log-loss. Final evaluation scores
25-frame segments through ``predict_segment``. All randomness flows from
one seed, so identical seeds give identical metric logs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from . import tensor as tz
from .layers import set_bn_updates, set_dropout_freeze
from .model import (FTFDNet, LoadedClip, ModelConfig, batch_inputs, logloss,
                    predict_segment, sigmoid_scores, window_inputs)
from .tensor import Tensor


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise RuntimeError(f"non-finite gradient in weight {name!r}")
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------

@dataclass
class EvalResult:
    acc: float                       # percent
    auc: float | None                # percent; None when the split is single-class
    logloss: float
    n_segments: int

    def row(self) -> str:
        auc = f"{self.auc:.2f}" if self.auc is not None else "-"
        return f"ACC {self.acc:.2f}  AUC {auc}  LogLoss {self.logloss:.4f}  n={self.n_segments}"


def auc_rank(scores, labels) -> float | None:
    """P(score_fake > score_real) + 0.5 P(tie) via average ranks (exact)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0    # average 1-based rank
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def score_metrics(scores, labels, clamp: float = 1e-7) -> EvalResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    acc = 100.0 * np.mean((scores >= 0.5).astype(int) == labels)
    auc = auc_rank(scores, labels)
    p = np.clip(scores, clamp, 1.0 - clamp)
    ll = float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1.0 - p)))
    return EvalResult(acc=float(acc), auc=None if auc is None else 100.0 * auc,
                      logloss=ll, n_segments=len(scores))


# ---------------------------------------------------------------------
# clip loading
# ---------------------------------------------------------------------

def load_clip(record: data_io.ClipRecord, fps: float = 25.0,
              expected_rate: int | None = None) -> LoadedClip:
    frames = data_io.read_clip_frames(record.frames_path)
    audio, rate = data_io.read_wav(record.audio_path)
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(
            f"{record.audio_path}: sample rate {rate} != expected {expected_rate} "
            "(resampling is out of scope)"
        )
    return LoadedClip(clip_id=record.clip_id, frames=frames, audio=audio,
                      sample_rate=rate, label=record.label, fps=fps)


def load_split(manifest_path, split: str, cfg: ModelConfig,
               cache: dict | None = None) -> list[LoadedClip]:
    """Load a split's clips; an optional cache shares clips (and their flow
    caches) across training runs on the same manifest."""
    key = (str(manifest_path), split)
    if cache is not None and key in cache:
        return cache[key]
    records = data_io.load_manifest(manifest_path)[split]
    clips = [load_clip(r, fps=cfg.fps, expected_rate=cfg.sample_rate) for r in records]
    if cache is not None:
        cache[key] = clips
    return clips


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FTFDNet
    history: list
    checkpoint_path: Path | None
    log_path: Path | None


def _forward_scores(model: FTFDNet, clips, starts, cfg, batch_size) -> np.ndarray:
    logits = np.empty(len(clips))
    with tz.no_grad():
        for lo in range(0, len(clips), batch_size):
            chunk = slice(lo, min(lo + batch_size, len(clips)))
            batch = batch_inputs([
                window_inputs(c, s, cfg)
                for c, s in zip(clips[chunk], starts[chunk])
            ])
            logits[chunk] = model.forward(batch).data
    return sigmoid_scores(logits)


def train(manifest_path, cfg: ModelConfig, epochs: int, *, batch_size: int = 32,
          lr: float = 1e-3, seed: int = 0, out_dir=None, quiet: bool = False,
          stop_at_val_logloss: float | None = None,
          clip_cache: dict | None = None) -> TrainResult:
    """Optimize on the manifest's train split; returns model, history, paths."""
    train_clips = load_split(manifest_path, "train", cfg, cache=clip_cache)
    if not train_clips:
        raise ValueError(f"{manifest_path}: train split is empty")
    val_clips = load_split(manifest_path, "val", cfg, cache=clip_cache)

    rng = np.random.default_rng(seed)
    model = FTFDNet(cfg)
    opt = Adam(model.named_params(), lr=lr, beta1=0.9, beta2=0.999, eps=1e-8)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "best.ckpt"
        log_path = out_dir / "metrics.tsv"

    span = cfg.t_frames + 1
    labels_all = np.array([c.label for c in train_clips])
    val_labels = np.array([c.label for c in val_clips])
    val_starts = np.array([(c.n_frames - span) // 2 for c in val_clips])

    history = []
    best_ll = np.inf
    lines = []
    for epoch in range(1, epochs + 1):
        t0 = time.time()
        model.train()
        order = rng.permutation(len(train_clips))
        starts = np.array([
            rng.integers(0, train_clips[i].n_frames - span + 1) for i in order
        ])
        total_loss = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            batch = batch_inputs([
                window_inputs(train_clips[i], starts[lo + k], cfg)
                for k, i in enumerate(idx)
            ])
            logits = model.forward(batch)
            loss = logloss(logits, labels_all[idx])
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"non-finite training loss {loss_val} at epoch {epoch}, batch {lo // batch_size}"
                )
            model.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss_val * len(idx)
        train_loss = total_loss / len(order)

        if val_clips:
            model.eval()
            val_scores = _forward_scores(model, val_clips, val_starts, cfg, batch_size)
            vm = score_metrics(val_scores, val_labels)
        else:
            vm = EvalResult(acc=float("nan"), auc=None, logloss=float("nan"), n_segments=0)

        row = {"epoch": epoch, "train_loss": train_loss, "val_acc": vm.acc,
               "val_auc": vm.auc, "val_logloss": vm.logloss}
        history.append(row)
        auc_s = f"{vm.auc:.4f}" if vm.auc is not None else "-"
        lines.append(f"{epoch}\t{train_loss:.6f}\t{vm.acc:.4f}\t{auc_s}\t{vm.logloss:.6f}")
        if not quiet:
            print(f"epoch {epoch:3d}  train_loss {train_loss:.4f}  "
                  f"val {vm.row()}  [{time.time() - t0:.1f}s]")
        if ckpt_path is not None and val_clips and vm.logloss < best_ll:
            best_ll = vm.logloss
            data_io.save_checkpoint(ckpt_path, model.state_arrays(), cfg.digest(),
                                    step=opt.step_count)
        if stop_at_val_logloss is not None and val_clips \
                and vm.logloss <= stop_at_val_logloss:
            if not quiet:
                print(f"early stop: val logloss {vm.logloss:.4f} "
                      f"<= {stop_at_val_logloss}")
            break
    if log_path is not None:
        log_path.write_text("\n".join(lines) + "\n")
    return TrainResult(model=model, history=history,
                       checkpoint_path=ckpt_path, log_path=log_path)


def evaluate(manifest_path, split: str, model: FTFDNet, *,
             threshold: float = 0.5, clip_cache: dict | None = None) -> EvalResult:
    """Segment-level metrics over a manifest split (25-frame segments)."""
    clips = load_split(manifest_path, split, model.cfg, cache=clip_cache)
    if not clips:
        raise ValueError(f"{manifest_path}: empty split {split!r}")
    scores = []
    labels = []
    for clip in clips:
        report = predict_segment(model, clip, threshold=threshold)
        scores.append(report.segment_score)
        labels.append(clip.label)
    return score_metrics(np.array(scores), np.array(labels))


# ---------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------

def mini_config(**overrides) -> ModelConfig:
    """8x8 two-block full model used by the gradient suite."""
    base = dict(t_frames=2, input_size=8, channels=1, widths=(4, 8), convs=(1, 1),
                fusion="cmf", attention="avam",
                modalities=("visual", "audio", "motion"),
                dropout=0.0, classifier_widths=(8, 4), dtype="float64", seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_weight: str
    n_entries: int
    seconds: float
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  max rel err {self.max_rel_error:.3e} "
                f"(worst: {self.worst_weight}, {self.n_entries} entries, "
                f"{self.seconds:.1f}s)")


def grad_check(cfg: ModelConfig | None = None, seed: int = 0, *,
               zero_input: bool = False, step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare every weight gradient against central finite differences."""
    cfg = cfg or mini_config()
    model = FTFDNet(cfg)
    model.train()
    set_bn_updates(model, False)        # keep the loss a pure function of weights
    set_dropout_freeze(model, True)

    rng = np.random.default_rng(seed)
    if zero_input:
        # zero-initialized biases + zero inputs park every ReLU exactly on its
        # kink; shift the weights to a generic point so the function is
        # differentiable there while the inputs stay degenerate
        nudge = np.random.default_rng(seed + 1)
        for p in model.named_params().values():
            p.data += nudge.uniform(-0.02, 0.02, size=p.shape)
    n = 2
    batch = {}
    if "visual" in cfg.modalities:
        shape = (n, cfg.t_frames * cfg.channels, cfg.input_size, cfg.input_size)
        batch["frames"] = np.zeros(shape) if zero_input else rng.random(shape)
    if "motion" in cfg.modalities:
        shape = (n, cfg.t_frames * 2, cfg.input_size, cfg.input_size)
        batch["flows"] = np.zeros(shape) if zero_input else rng.standard_normal(shape)
    if "audio" in cfg.modalities:
        shape = (n, 1, cfg.input_size, cfg.input_size)
        batch["spec"] = np.zeros(shape) if zero_input else rng.standard_normal(shape)
    labels = np.arange(n) % 2

    t0 = time.time()
    loss = logloss(model.forward(batch), labels)
    model.zero_grad()
    loss.backward()
    params = model.named_params()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def loss_value() -> float:
        with tz.no_grad():
            return float(logloss(model.forward(batch), labels).data)

    worst = 0.0
    worst_name = "-"
    n_entries = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_value()
            flat[i] = orig - step
            fm = loss_value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            # the 1e-4 floor keeps finite-difference cancellation noise
            # (~1e-9 absolute) from dominating entries whose true gradient is 0
            scale = max(abs(gflat[i]), abs(numeric), 1e-4)
            rel = abs(gflat[i] - numeric) / scale
            n_entries += 1
            if rel > worst:
                worst = rel
                worst_name = name
    set_dropout_freeze(model, False)
    if not np.all(np.isfinite([v for g in analytic.values() for v in g.reshape(-1)])):
        worst = float("inf")
        worst_name = "non-finite analytic gradient"
    return GradCheckReport(max_rel_error=worst, worst_weight=worst_name,
                           n_entries=n_entries, seconds=time.time() - t0,
                           tolerance=tolerance)
