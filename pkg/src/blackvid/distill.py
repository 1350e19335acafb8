"""Knowledge extraction from the black-box predictor.

The teacher side never exposes parameters: adaptation sees only per-video
class distributions.  Those are denoised by adaptive label smoothing (keep
the top-c probabilities, spread the rest uniformly), stored per video, and
refreshed once per epoch by an exponential moving average with the student's
own evaluation-mode predictions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, FormatError

BANK_MAGIC = b"BVTB"
BANK_VERSION = 1


@dataclass
class AdaLSConfig:
    """Adaptive label smoothing: keep the top_c classes of C."""

    top_c: int
    num_classes: int

    def __post_init__(self):
        if not (1 <= self.top_c < self.num_classes):
            raise ConfigError(
                f"adaptive smoothing needs 1 <= c < C, got c={self.top_c}, C={self.num_classes}")


def adals(pred: np.ndarray, cfg: AdaLSConfig) -> np.ndarray:
    """Keep the top-c probabilities verbatim; spread the residual mass
    uniformly over the other C-c classes.  Ties at rank c break toward the
    lower class index.  Idempotent."""
    p = np.asarray(pred)
    if p.shape[-1] != cfg.num_classes:
        raise ConfigError(f"prediction has {p.shape[-1]} classes, config says {cfg.num_classes}")
    if p.ndim == 1:
        return _adals_row(p, cfg.top_c)
    return np.stack([_adals_row(row, cfg.top_c) for row in p])


def _adals_row(p: np.ndarray, c: int) -> np.ndarray:
    order = np.argsort(-p, kind="stable")  # descending, ties -> lower index first
    top = order[:c]
    kept = p[top].sum()
    residual = 1.0 - kept
    assert residual > -1e-5, f"top-{c} mass {kept} exceeds 1"
    out = np.full(p.shape, max(residual, 0.0) / (p.shape[0] - c), dtype=p.dtype)
    out[top] = p[top]
    return out


class TeacherBank:
    """Per-video smoothed teacher distributions with EMA refresh."""

    def __init__(self, num_classes: int, gamma: float, entries: dict[str, np.ndarray] | None = None):
        if not (0.0 <= gamma <= 1.0):
            raise ConfigError(f"EMA momentum must be in [0, 1], got {gamma}")
        self.num_classes = num_classes
        self.gamma = float(gamma)
        self.entries: dict[str, np.ndarray] = entries or {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.entries

    def get(self, video_id: str) -> np.ndarray:
        if video_id not in self.entries:
            raise DataError(f"no teacher entry for video {video_id!r}")
        return self.entries[video_id]

    def matrix(self, video_ids: list[str]) -> np.ndarray:
        """Teacher rows for a batch, in batch order."""
        missing = [v for v in video_ids if v not in self.entries]
        if missing:
            raise DataError(f"missing teacher entries for: {', '.join(sorted(missing))}")
        return np.stack([self.entries[v] for v in video_ids])


def init_teacher_bank(predictions: dict[str, np.ndarray], cfg: AdaLSConfig,
                      gamma: float, required_ids=None) -> TeacherBank:
    """Smooth every black-box prediction into the initial bank."""
    if required_ids is not None:
        missing = sorted(set(required_ids) - set(predictions))
        if missing:
            raise DataError(f"no black-box prediction for: {', '.join(missing)}")
    entries = {
        vid: adals(np.asarray(p, dtype=np.float32), cfg)
        for vid, p in predictions.items()
    }
    return TeacherBank(cfg.num_classes, gamma, entries)


def ema_update(bank: TeacherBank, student_preds: dict[str, np.ndarray]) -> TeacherBank:
    """bank <- gamma*bank + (1-gamma)*student, renormalized onto the simplex.

    Called once per epoch with evaluation-mode student predictions.
    """
    missing = sorted(set(bank.entries) ^ set(student_preds))
    if missing:
        raise DataError(f"teacher/student id mismatch on: {', '.join(missing)}")
    g = np.float32(bank.gamma)
    for vid, old in bank.entries.items():
        mixed = g * old + (np.float32(1.0) - g) * np.asarray(student_preds[vid], dtype=np.float32)
        bank.entries[vid] = mixed / mixed.sum()
    return bank


def loss_kd(bank: TeacherBank, video_ids: list[str], student_pred: Tensor) -> Tensor:
    """Batch-mean KL(teacher || student); the teacher side is constant."""
    student_pred = ad.as_tensor(student_pred)
    teacher = bank.matrix(video_ids).astype(student_pred.dtype)
    if teacher.shape != student_pred.data.shape:
        raise DataError(
            f"teacher matrix {teacher.shape} does not match student batch {student_pred.data.shape}")
    return ad.tmean(ad.kl_div(Tensor(teacher), student_pred))


def loss_mi(student_pred: Tensor) -> Tensor:
    """Mutual information surrogate: H(mean prediction) - mean H(prediction).

    In [0, ln C]; larger means diverse yet individually confident predictions.
    """
    student_pred = ad.as_tensor(student_pred)
    if student_pred.data.ndim != 2 or student_pred.data.shape[0] == 0:
        raise ValueError(f"loss_mi needs a nonempty (B, C) batch, got {student_pred.data.shape}")
    marginal = ad.tmean(student_pred, axis=0)
    return ad.sub(ad.entropy(marginal), ad.tmean(ad.entropy(student_pred)))


def total_objective(kd: Tensor, endo: Tensor, exo: Tensor, mi: Tensor, beta_reg: float) -> Tensor:
    """kd + beta_reg*(endo + exo) - mi: the scalar the optimizer minimizes."""
    reg = ad.scale(ad.add(ad.as_tensor(endo), ad.as_tensor(exo)), beta_reg)
    return ad.sub(ad.add(ad.as_tensor(kd), reg), ad.as_tensor(mi))


# ---------------------------------------------------------------------------
# snapshot file ("BVTB"): resume adaptation without re-querying the black box


def save_bank(bank: TeacherBank, path) -> None:
    out = bytearray()
    out += BANK_MAGIC
    out += struct.pack("<II", BANK_VERSION, bank.num_classes)
    out += struct.pack("<f", bank.gamma)
    out += struct.pack("<I", len(bank.entries))
    for vid in sorted(bank.entries):
        raw = vid.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += bank.entries[vid].astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_bank(path) -> TeacherBank:
    from .audit import note_open

    note_open(path)
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected BVTB")
    version, num_classes = struct.unpack("<II", take(8))
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version} at byte 4")
    (gamma,) = struct.unpack("<f", take(4))
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        vid = take(n).decode("utf-8")
        entries[vid] = np.frombuffer(take(4 * num_classes), dtype="<f4").astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return TeacherBank(num_classes, float(gamma), entries)
