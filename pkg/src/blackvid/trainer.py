"""Adaptation trainer and evaluation.

Per step: clip features -> certainty weights (optional) -> temporal features
-> student predictions; then the enabled losses (distillation, within-video
and cross-video consistency, mutual information) are combined into
    total = kd + beta_reg * (endo + exo) - mi
and minimized by SGD with momentum and cosine learning-rate decay.  Once per
epoch the teacher bank is EMA-refreshed with evaluation-mode student
predictions.

The trainer reads target ids and features only; labels stay with the
evaluator.  Teacher predictions arrive exclusively through PredictionClient.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import regularizers as reg
from .autodiff import SGD, Tape, Tensor, cosine_lr
from .backbone import (ModelDims, TargetModel, clip_feature_batch, clip_weight_batch,
                       forward_probs, predict_batch, temporal_feature_batch)
from .data import DomainManifest, load_sequences
from .distill import (AdaLSConfig, TeacherBank, ema_update, init_teacher_bank,
                      loss_kd, loss_mi, total_objective)
from .errors import ConfigError, DataError, NumericalError
from .oracle import PredictionClient
from .rng import RngState

LOSS_KEYS = ("loss_kd", "loss_endo", "loss_exo", "loss_mi", "loss_total")

# A freshly initialized head predicts near-uniform on every clip, so certainty
# weights start near zero and would scale the temporal feature (and its
# gradients) to nothing.  Aggregation runs unweighted for this many epochs
# before the weights switch on.
WEIGHT_WARMUP_EPOCHS = 2

# Consistency losses against very sharp self-targets produce log(eps)-scale
# gradient spikes; a global norm clip keeps the step bounded.
MAX_GRAD_NORM = 5.0


def consistency_ramp(epoch: int, total_epochs: int) -> float:
    """Consistency-term schedule: zero for the first quarter of training,
    then a linear ramp to full strength at the halfway point.

    A from-scratch student must first differentiate videos via distillation
    (and its clip-level predictions must sharpen) before the consistency
    losses help; active during that fragile phase, their trivial minimum, a
    constant predictor, wins instead.
    """
    start = total_epochs // 4
    full_at = max(start + 1, total_epochs // 2)
    if epoch < start:
        return 0.0
    return min(1.0, (epoch - start) / (full_at - start))


@dataclass
class AdaptConfig:
    """Adaptation hyper-parameters and ablation switches."""

    alpha_v: float = 0.3
    alpha_t: float = 0.3
    beta_reg: float = 1.0
    top_c: int = 3              # capped at C-1 once C is known
    gamma_ema: float = 0.95     # per-epoch EMA; desk scale has few steps per epoch
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    endo: bool = True
    exo: bool = True
    vir: bool = True
    pre: bool = True
    mi: bool = True
    clip_weights: bool = True
    teacher_mode: str = "soft"  # or "hard"
    symmetric_grad: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha_v", "alpha_t", "learning_rate"):
            if not (getattr(self, name) > 0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta_reg",):
            if not (getattr(self, name) >= 0):
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("top_c", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0.0 <= self.gamma_ema <= 1.0):
            raise ConfigError(f"gamma_ema must be in [0, 1], got {self.gamma_ema}")
        if self.teacher_mode not in ("soft", "hard"):
            raise ConfigError(f"teacher_mode must be 'soft' or 'hard', got {self.teacher_mode!r}")


@dataclass
class RunReport:
    """Per-epoch loss components plus the run's bookkeeping.

    wall_clock_s is informational and excluded from metrics files so that
    identical (config, seed, inputs) yield bit-identical files.
    """

    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final_accuracy: float | None = None
    per_class_accuracy: dict[int, float] | None = None
    mask_draws: int = 0
    wall_clock_s: float = 0.0
    teacher_bank: "TeacherBank | None" = field(default=None, repr=False)

    def to_records(self) -> list[dict]:
        records = [{"epoch": i, **e} for i, e in enumerate(self.epochs)]
        summary = {
            "summary": True,
            "seed": self.seed,
            "config": self.config,
            "mask_draws": self.mask_draws,
        }
        if self.final_accuracy is not None:
            summary["accuracy"] = self.final_accuracy
            summary["per_class_accuracy"] = {
                str(k): v for k, v in (self.per_class_accuracy or {}).items()}
        records.append(summary)
        return records


def write_metrics(report: RunReport, path) -> None:
    """Line-delimited records: one object per epoch, then a summary object."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in report.to_records():
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(parts: dict[str, float], step: int) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericalError(f"{name} became non-finite ({value}) at step {step}")


def adapt(target_manifest: DomainManifest, teacher: str | Path | PredictionClient,
          cfg: AdaptConfig, dims: ModelDims | None = None) -> tuple[TargetModel, RunReport]:
    """Adapt a fresh target model against black-box predictions.

    `teacher` is a prediction-dump path, an endpoint URL, or a ready client.
    Returns the trained model and the run report (accuracy left unset; score
    it separately with `evaluate`, which is the only label-reading stage).
    """
    t_start = time.perf_counter()
    manifest = target_manifest.without_labels()
    seqs = load_sequences(manifest)
    if not seqs:
        raise DataError("target manifest has no records")
    ids = [s.video_id for s in seqs]
    frames = np.stack([s.frames for s in seqs])
    n, k, d = frames.shape

    client = teacher if isinstance(teacher, PredictionClient) else PredictionClient(teacher)
    meta = client.meta()
    num_classes = int(meta["classes"])
    if "frames" in meta and (meta["frames"] != k or meta["dim"] != d):
        raise DataError(
            f"service expects (k={meta['frames']}, D={meta['dim']}), target data is (k={k}, D={d})")

    if dims is None:
        dims = ModelDims(frames=k, frame_dim=d, num_classes=num_classes)
    rng = RngState(cfg.seed).spawn("adapt")
    model = TargetModel.build(dims, rng.spawn("init"))
    train_rng = rng.spawn("train")

    teacher_preds = client.fetch_all(ids, frames, mode=cfg.teacher_mode)
    c_eff = min(cfg.top_c, num_classes - 1)
    bank = init_teacher_bank(teacher_preds, AdaLSConfig(c_eff, num_classes),
                             gamma=cfg.gamma_ema, required_ids=ids)

    report = RunReport(config=asdict(cfg), seed=cfg.seed)
    opt = SGD(model.params(), cfg.learning_rate, cfg.momentum)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    reg_cfg = reg.RegConfig(alpha_v=cfg.alpha_v, alpha_t=cfg.alpha_t)
    stop = not cfg.symmetric_grad
    endo_active = cfg.endo and (cfg.vir or cfg.pre)
    step = 0

    for _epoch in range(cfg.epochs):
        weighted_now = cfg.clip_weights and _epoch >= WEIGHT_WARMUP_EPOCHS
        ramp = consistency_ramp(_epoch, cfg.epochs)
        endo_now = endo_active and ramp > 0.0
        exo_now = cfg.exo and ramp > 0.0
        order = train_rng.permutation(n)
        sums = {key: 0.0 for key in LOSS_KEYS}
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_ids = [ids[i] for i in idx]
            b = len(idx)
            model.zero_grad()
            with Tape() as tape:
                clips = clip_feature_batch(frames[idx], model.bank)
                weights = (clip_weight_batch(clips, model.head, num_classes)
                           if weighted_now else None)
                temporal = temporal_feature_batch(clips, weights)
                student = predict_batch(temporal, model.head)

                l_kd = loss_kd(bank, batch_ids, student)
                l_mi = loss_mi(student) if cfg.mi else Tensor(np.float32(0.0))

                if endo_now:
                    draws = reg.draw_mask_batch(k, b, train_rng, reg_cfg)
                    report.mask_draws += b
                    first, second, lam = reg.select_clip_pairs(clips, draws)
                    virtual = ad.mixup(first, second, lam)
                    virtual_pred = predict_batch(virtual, model.head)
                    vir_terms = None
                    pre_terms = None
                    if cfg.vir:
                        mixed = ad.mixup(ad.softmax(model.head(first)),
                                         ad.softmax(model.head(second)), lam)
                        vir_terms = reg.loss_vir(virtual_pred, mixed, stop_gradient=stop)
                    if cfg.pre:
                        pre_terms = reg.loss_pre(virtual_pred, student, stop_gradient=stop)
                    l_endo = ad.scale(reg.loss_endo(vir_terms, pre_terms), ramp)
                else:
                    l_endo = Tensor(np.float32(0.0))

                if exo_now:
                    partners = reg.exo_pairing(b, train_rng)
                    lam_t = train_rng.beta(cfg.alpha_t, cfg.alpha_t, size=b)
                    l_exo = ad.scale(ad.tmean(reg.loss_exo_batch(
                        temporal, model.head, partners, lam_t, stop_gradient=stop)), ramp)
                else:
                    l_exo = Tensor(np.float32(0.0))

                total = total_objective(l_kd, l_endo, l_exo, l_mi, cfg.beta_reg)
                parts = {
                    "loss_kd": l_kd.item(), "loss_endo": l_endo.item(),
                    "loss_exo": l_exo.item(), "loss_mi": l_mi.item(),
                    "loss_total": total.item(),
                }
                _check_finite(parts, step)
                tape.backward(total)
            ad.clip_grad_norm(opt.params, MAX_GRAD_NORM)
            opt.lr = cosine_lr(cfg.learning_rate, step, total_steps)
            opt.step()
            for key in LOSS_KEYS:
                sums[key] += parts[key] * b
            seen += b
            step += 1

        # epoch boundary: refresh the teacher bank with clean student predictions
        student_eval = forward_probs(model, frames, weighted=weighted_now)
        ema_update(bank, {vid: student_eval[i] for i, vid in enumerate(ids)})
        report.epochs.append({key: sums[key] / seen for key in LOSS_KEYS})

    report.wall_clock_s = time.perf_counter() - t_start
    report.teacher_bank = bank
    return model, report


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    num_videos: int


def _score(pred_rows: np.ndarray, labels: np.ndarray, label_space: list[int]) -> EvalResult:
    classes = np.asarray(label_space, dtype=np.intp)
    restricted = pred_rows[:, classes]
    picked = classes[restricted.argmax(axis=1)]
    correct = picked == labels
    per_class = {}
    for cls in label_space:
        mask = labels == cls
        if mask.any():
            per_class[int(cls)] = float(correct[mask].mean())
    return EvalResult(float(correct.mean()), per_class, len(labels))


def evaluate(model: TargetModel, manifest: DomainManifest,
             weighted: bool = True) -> EvalResult:
    """Top-1 accuracy in evaluation mode (no masking, no mixing).

    Partial-set targets are scored over the manifest's label space only.
    """
    seqs = load_sequences(manifest)
    unlabeled = [s.video_id for s in seqs if s.label is None]
    if unlabeled:
        raise DataError(f"evaluation needs labels; unlabeled: {', '.join(unlabeled[:5])}")
    labels = np.array([s.label for s in seqs], dtype=np.intp)
    frames = np.stack([s.frames for s in seqs])
    probs = forward_probs(model, frames, weighted=weighted)
    return _score(probs, labels, manifest.label_space)


def evaluate_predictions(pred_map: dict[str, np.ndarray],
                         manifest: DomainManifest) -> EvalResult:
    """Score an id->distribution map (e.g. a prediction dump) against labels."""
    labels, rows = [], []
    for rec in manifest.records:
        if rec.label is None:
            raise DataError(f"evaluation needs labels; unlabeled: {rec.video_id}")
        if rec.video_id not in pred_map:
            raise DataError(f"no prediction for video {rec.video_id!r}")
        labels.append(rec.label)
        rows.append(pred_map[rec.video_id])
    if not rows:
        raise DataError("empty manifest")
    return _score(np.stack(rows), np.array(labels, dtype=np.intp), manifest.label_space)


# ---------------------------------------------------------------------------
# suites


ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_endo", {"endo": False}),
    ("wo_exo", {"exo": False}),
    ("wo_vir", {"vir": False}),
    ("wo_pre", {"pre": False}),
    ("wo_mi", {"mi": False}),
)


def _with_overrides(cfg: AdaptConfig, **overrides) -> AdaptConfig:
    kw = asdict(cfg)
    kw.update(overrides)
    return AdaptConfig(**kw)


def run_ablation_suite(target_manifest: DomainManifest, teacher, base_cfg: AdaptConfig,
                       eval_manifest: DomainManifest, seeds=range(5),
                       dims: ModelDims | None = None) -> list[dict]:
    """All loss ablations x clip-weight settings x seeds; one row per run."""
    rows = []
    for name, flags in ABLATION_VARIANTS:
        for weights_on in (True, False):
            for seed in seeds:
                cfg = _with_overrides(base_cfg, clip_weights=weights_on, seed=seed, **flags)
                model, report = adapt(target_manifest, teacher, cfg, dims=dims)
                result = evaluate(model, eval_manifest, weighted=weights_on)
                rows.append({
                    "variant": name, "clip_weights": weights_on, "seed": seed,
                    "accuracy": result.accuracy, "mask_draws": report.mask_draws,
                })
    return rows


def sweep(target_manifest: DomainManifest, teacher, base_cfg: AdaptConfig,
          eval_manifest: DomainManifest, beta_grid, alpha_grid,
          dims: ModelDims | None = None) -> list[dict]:
    """Grid over (beta_reg, alpha_v); one report row per grid point."""
    rows = []
    for beta in beta_grid:
        for alpha in alpha_grid:
            cfg = _with_overrides(base_cfg, beta_reg=float(beta), alpha_v=float(alpha))
            model, _report = adapt(target_manifest, teacher, cfg, dims=dims)
            result = evaluate(model, eval_manifest, weighted=cfg.clip_weights)
            rows.append({"beta_reg": float(beta), "alpha_v": float(alpha),
                         "accuracy": result.accuracy})
    return rows
