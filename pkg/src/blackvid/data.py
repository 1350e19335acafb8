"""Synthetic cross-domain video-feature benchmark, plus feature-file and
manifest IO.

Each class is a prototype in feature space plus a per-frame temporal
signature (a ramp along a class direction).  A configurable fraction of class
pairs share the prototype and differ only by time-reversed signatures, so an
order-blind model cannot separate them.  The target domain applies a rotation
in a fixed random 2D plane and a translation, with its own noise scale.

Feature file ("BVFF"): magic, u32 version=1, u32 k, u32 D, then k*D
little-endian float32, one row per frame.

Manifest: UTF-8 text, one tab-separated record per line: id, relative path,
label integer or "-" for unlabeled; "#" lines are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audit import note_open
from .backbone import FrameFeatureSequence
from .errors import ConfigError, DataError, FormatError
from .rng import RngState

FEATURE_MAGIC = b"BVFF"
FEATURE_VERSION = 1


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    video_id: str
    path: Path
    label: int | None


@dataclass
class DomainManifest:
    records: list[ManifestRecord]
    root: Path

    def __len__(self) -> int:
        return len(self.records)

    @property
    def label_space(self) -> list[int]:
        """Class indices present among labeled records, ascending."""
        return sorted({r.label for r in self.records if r.label is not None})

    def without_labels(self) -> "DomainManifest":
        """Adaptation view: ids and paths only."""
        return DomainManifest(
            records=[replace(r, label=None) for r in self.records], root=self.root)


def load_manifest(path, num_classes: int | None = None,
                  require_labels: bool = False) -> DomainManifest:
    """Parse and validate a manifest; errors carry line numbers."""
    path = Path(path)
    note_open(path)
    root = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            vid, rel, label_s = parts
            if vid in seen:
                raise DataError(
                    f"{path}: duplicate id {vid!r} on lines {seen[vid]} and {lineno}")
            seen[vid] = lineno
            feature_path = root / rel
            if not feature_path.is_file():
                raise DataError(f"{path}:{lineno}: feature file not found: {feature_path}")
            if label_s == "-":
                if require_labels:
                    raise DataError(f"{path}:{lineno}: unlabeled record {vid!r} where labels are required")
                label = None
            else:
                try:
                    label = int(label_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad label {label_s!r}") from None
                if label < 0 or (num_classes is not None and label >= num_classes):
                    raise DataError(
                        f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            records.append(ManifestRecord(vid, feature_path, label))
    return DomainManifest(records=records, root=root)


def write_manifest(path, records: list[ManifestRecord], root: Path | None = None) -> None:
    path = Path(path)
    root = root if root is not None else path.parent
    lines = ["# id\tpath\tlabel"]
    for r in records:
        label_s = "-" if r.label is None else str(r.label)
        lines.append(f"{r.video_id}\t{Path(r.path).relative_to(root).as_posix()}\t{label_s}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# feature files


def write_feature_file(path, seq: FrameFeatureSequence) -> None:
    k, d = seq.frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, k, d))
        f.write(seq.frames.astype("<f4").tobytes())


def read_feature_file(path, label: int | None = None) -> FrameFeatureSequence:
    path = Path(path)
    note_open(path)
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected BVFF")
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(buf)}")
    version, k, d = struct.unpack("<III", buf[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = 16 + 4 * k * d
    if len(buf) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for k={k}, D={d}, got {len(buf)} "
            f"(truncation at byte {min(len(buf), expected)})")
    frames = np.frombuffer(buf[16:], dtype="<f4").reshape(k, d).astype(np.float32)
    return FrameFeatureSequence(video_id=path.stem, frames=frames, label=label)


def load_sequences(manifest: DomainManifest) -> list[FrameFeatureSequence]:
    """Read every record's feature file, keeping manifest order and labels."""
    seqs = []
    for rec in manifest.records:
        try:
            seq = read_feature_file(rec.path, label=rec.label)
        except OSError as e:
            raise DataError(f"cannot read feature file {rec.path}: {e}") from None
        seq.video_id = rec.video_id
        seqs.append(seq)
    return seqs


# ---------------------------------------------------------------------------
# synthetic benchmark generation


@dataclass
class ShiftSpec:
    """Controls for the synthetic cross-domain benchmark."""

    num_classes: int = 6
    frames: int = 8
    dim: int = 32
    videos_per_class: int = 60
    rotation: float = 0.5       # radians, applied in a fixed random 2D plane
    translation: float = 1.0    # magnitude along a fixed random unit vector
    source_noise: float = 0.25
    target_noise: float = 0.25
    temporal_dependence: float = 0.5  # fraction of class pairs split only by frame order
    partial_target_classes: tuple[int, ...] | None = None
    prototype_scale: float = 1.0
    signature_scale: float = 1.2
    signal_rank: int = 6  # class geometry and shift live in this many of the D dims

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.frames < 3:
            raise ConfigError(f"need at least 3 frames, got {self.frames}")
        if not (0.0 <= self.temporal_dependence <= 1.0):
            raise ConfigError(
                f"temporal_dependence must be in [0, 1], got {self.temporal_dependence}")
        if self.partial_target_classes is not None:
            subset = tuple(sorted(set(int(c) for c in self.partial_target_classes)))
            if not subset:
                raise ConfigError("partial_target_classes must be nonempty when given")
            if subset[0] < 0 or subset[-1] >= self.num_classes:
                raise ConfigError(
                    f"partial_target_classes {subset} outside [0, {self.num_classes})")
            self.partial_target_classes = subset
        self.n_twin_pairs = int(round(self.temporal_dependence * self.num_classes / 2.0))
        if self.temporal_dependence == 1.0 and self.num_classes % 2 == 1:
            raise ConfigError(
                f"temporal_dependence=1 needs an even class count, got {self.num_classes}")


class _ClassGeometry:
    """Prototypes, signatures, and the domain shift map, all seed-frozen.

    Class signal is confined to a random rank-`signal_rank` subspace; the
    rotation plane and translation direction are drawn inside the same
    subspace so the configured shift actually perturbs the signal rather than
    vanishing into the noise-only dimensions.
    """

    def __init__(self, spec: ShiftSpec, rng: RngState):
        c, d, k = spec.num_classes, spec.dim, spec.frames
        m = min(spec.signal_rank, d)
        span = np.linalg.qr(rng.normal(0.0, 1.0, (d, m)))[0]  # (d, m) orthonormal

        def in_span(rows: int) -> np.ndarray:
            coeff = rng.normal(0.0, 1.0, (rows, m))
            return coeff @ span.T

        protos = in_span(c)
        protos *= spec.prototype_scale / np.linalg.norm(protos, axis=1, keepdims=True)
        directions = in_span(c)
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        # Twin pair (2i, 2i+1): shared prototype, time-reversed signatures.
        for i in range(spec.n_twin_pairs):
            a, b = 2 * i, 2 * i + 1
            protos[b] = protos[a]
            directions[b] = -directions[a]
        ramp = np.linspace(-1.0, 1.0, k)
        self.signatures = spec.signature_scale * ramp[None, :, None] * directions[:, None, :]
        self.prototypes = protos
        # Shift map: rotation in span{e1, e2} plus translation along u.
        basis = np.linalg.qr(in_span(2).T)[0]
        self.e1, self.e2 = basis[:, 0], basis[:, 1]
        u = in_span(1)[0]
        self.u = u / np.linalg.norm(u)
        self.spec = spec

    def clean_video(self, cls: int) -> np.ndarray:
        return self.prototypes[cls][None, :] + self.signatures[cls]

    def shift(self, x: np.ndarray) -> np.ndarray:
        th = self.spec.rotation
        a = x @ self.e1
        b = x @ self.e2
        rot = (
            x
            + np.outer((np.cos(th) - 1.0) * a - np.sin(th) * b, self.e1)
            + np.outer(np.sin(th) * a + (np.cos(th) - 1.0) * b, self.e2)
        )
        return rot + self.spec.translation * self.u


@dataclass
class GeneratedDomains:
    source_manifest: Path
    target_manifest: Path
    spec: ShiftSpec
    seed: int


def generate(spec: ShiftSpec, seed: int, out_dir) -> GeneratedDomains:
    """Write source and target domains (feature files + manifests) under out_dir.

    Deterministic: identical spec+seed produce bitwise-identical files.  Each
    video's noise comes from a substream keyed by its id.
    """
    out_dir = Path(out_dir)
    geom = _ClassGeometry(spec, RngState(seed).spawn("classes"))
    manifests = {}
    for domain in ("source", "target"):
        droot = out_dir / domain
        (droot / "features").mkdir(parents=True, exist_ok=True)
        classes = range(spec.num_classes)
        if domain == "target" and spec.partial_target_classes is not None:
            classes = spec.partial_target_classes
        noise = spec.source_noise if domain == "source" else spec.target_noise
        records = []
        for cls in classes:
            clean = geom.clean_video(cls)
            if domain == "target":
                clean = geom.shift(clean)
            for v in range(spec.videos_per_class):
                vid = f"{domain[:3]}_c{cls}_v{v:03d}"
                vrng = RngState(seed).spawn("video", vid)
                frames = clean + noise * vrng.normal(0.0, 1.0, clean.shape)
                rel = Path("features") / f"{vid}.bvff"
                write_feature_file(
                    droot / rel,
                    FrameFeatureSequence(vid, frames.astype(np.float32), label=cls))
                records.append(ManifestRecord(vid, droot / rel, cls))
        write_manifest(droot / "manifest.tsv", records, root=droot)
        manifests[domain] = droot / "manifest.tsv"
    return GeneratedDomains(manifests["source"], manifests["target"], spec, seed)
