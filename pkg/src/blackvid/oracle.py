"""The black-box side: train the source classifier, then expose it only as a
prediction endpoint (live HTTP service) or an offline prediction dump.

Routes:
    GET  /meta     -> {"classes": C, "frames": k, "dim": D}
    POST /predict  -> body {"mode": "soft"|"hard", "sequences": [[[D]*k], ...]}
                      response {"probs": [[C], ...]}

Prediction dump ("BVPD"): magic, u32 version, u32 C, then records of
(u16 id length, id utf-8, C little-endian float32).

Adaptation code must consume predictions only through PredictionClient; it
never loads a source checkpoint or source feature file.
"""

from __future__ import annotations

import json
import math
import struct
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audit import note_open, note_route
from .autodiff import SGD, Tape, Tensor, cosine_lr
from .backbone import (ModelDims, TargetModel, clip_feature_batch, forward_probs,
                       predict_batch, temporal_feature_batch)
from .data import DomainManifest, load_sequences
from .errors import DataError, NumericalError
from .rng import RngState

DUMP_MAGIC = b"BVPD"
DUMP_VERSION = 1
BATCH_LIMIT = 64


@dataclass
class SourceTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    holdout_fraction: float = 0.2
    seed: int = 0


def train_source(manifest: DomainManifest, cfg: SourceTrainConfig,
                 dims: ModelDims | None = None) -> tuple[TargetModel, dict]:
    """Supervised training on the labeled source domain.

    Plain cross-entropy on one-hot labels over unweighted temporal features;
    reports held-out source accuracy.  No adaptation machinery is involved.
    """
    seqs = load_sequences(manifest)
    unlabeled = [s.video_id for s in seqs if s.label is None]
    if unlabeled:
        raise DataError(f"source manifest has unlabeled records: {', '.join(unlabeled[:5])}")
    labels = np.array([s.label for s in seqs], dtype=np.intp)
    num_classes = int(labels.max()) + 1
    frames = np.stack([s.frames for s in seqs])
    n, k, d = frames.shape

    if dims is None:
        dims = ModelDims(frames=k, frame_dim=d, num_classes=num_classes)
    rng = RngState(cfg.seed).spawn("source")
    model = TargetModel.build(dims, rng.spawn("init"))
    train_rng = rng.spawn("train")

    order = train_rng.permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]

    opt = SGD(model.params(), cfg.learning_rate, cfg.momentum)
    steps_per_epoch = max(1, math.ceil(len(train_idx) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        perm = train_rng.permutation(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(train_idx), cfg.batch_size):
            idx = train_idx[perm[start:start + cfg.batch_size]]
            onehot = np.zeros((len(idx), num_classes), dtype=np.float32)
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            model.zero_grad()
            with Tape() as tape:
                clips = clip_feature_batch(frames[idx], model.bank)
                t = temporal_feature_batch(clips, None)
                probs = predict_batch(t, model.head)
                loss = ad.tmean(ad.cross_entropy_soft(Tensor(onehot), probs))
                if not np.isfinite(loss.data):
                    raise NumericalError(f"source loss became non-finite at step {step}")
                tape.backward(loss)
            opt.lr = cosine_lr(cfg.learning_rate, step, total_steps)
            opt.step()
            epoch_loss += loss.item() * len(idx)
            step += 1
        history.append(epoch_loss / max(1, len(train_idx)))

    def accuracy(idx):
        if len(idx) == 0:
            return float("nan")
        probs = forward_probs(model, frames[idx], weighted=False)
        return float((probs.argmax(axis=1) == labels[idx]).mean())

    report = {
        "holdout_accuracy": accuracy(hold_idx),
        "train_accuracy": accuracy(train_idx),
        "loss_history": history,
        "num_classes": num_classes,
        "config": vars(cfg).copy(),
    }
    return model, report


# ---------------------------------------------------------------------------
# prediction dump


def _soft_or_hard(probs: np.ndarray, mode: str) -> np.ndarray:
    if mode == "soft":
        return probs.astype(np.float32)
    if mode == "hard":
        hard = np.zeros_like(probs, dtype=np.float32)
        hard[np.arange(probs.shape[0]), probs.argmax(axis=1)] = 1.0
        return hard
    raise DataError(f"unknown prediction mode {mode!r} (use 'soft' or 'hard')")


def dump_predictions(model: TargetModel, manifest: DomainManifest, mode: str, out_path) -> None:
    """One prediction per manifest video, identical to the live service's."""
    seqs = load_sequences(manifest)
    ids = [s.video_id for s in seqs]
    if seqs:
        frames = np.stack([s.frames for s in seqs])
        probs = _soft_or_hard(forward_probs(model, frames, weighted=False), mode)
    else:
        probs = np.zeros((0, model.num_classes), dtype=np.float32)
    write_prediction_dump(out_path, model.num_classes, zip(ids, probs))


def write_prediction_dump(path, num_classes: int, records) -> None:
    out = bytearray()
    out += DUMP_MAGIC
    out += struct.pack("<II", DUMP_VERSION, num_classes)
    for vid, row in records:
        raw = vid.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += np.asarray(row, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_prediction_dump(path) -> tuple[dict[str, np.ndarray], int]:
    path = Path(path)
    note_open(path)
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"{path}: truncated prediction dump at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != DUMP_MAGIC:
        raise DataError(f"{path}: bad magic, expected BVPD")
    version, num_classes = struct.unpack("<II", take(8))
    if version != DUMP_VERSION:
        raise DataError(f"{path}: unsupported dump version {version}")
    preds = {}
    while pos < len(buf):
        (n,) = struct.unpack("<H", take(2))
        vid = take(n).decode("utf-8")
        preds[vid] = np.frombuffer(take(4 * num_classes), dtype="<f4").astype(np.float32)
    return preds, num_classes


# ---------------------------------------------------------------------------
# live service


class _Handler(BaseHTTPRequestHandler):
    model: TargetModel = None  # set by start_service on the subclass

    def log_message(self, *args):  # silence request logging
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/meta":
            self._send(404, {"error": f"unknown route {self.path}"})
            return
        m = self.model
        self._send(200, {"classes": m.num_classes, "frames": m.k, "dim": m.frame_dim})

    def do_POST(self):
        if self.path != "/predict":
            self._send(404, {"error": f"unknown route {self.path}"})
            return
        m = self.model
        expected = {"frames": m.k, "dim": m.frame_dim}
        try:
            length = int(self.headers.get("Content-Length", "0"))
            req = json.loads(self.rfile.read(length))
            mode = req.get("mode", "soft")
            sequences = req["sequences"]
        except (ValueError, KeyError) as e:
            self._send(400, {"error": f"bad request body: {e}", "expected": expected})
            return
        if mode not in ("soft", "hard"):
            self._send(400, {"error": f"unknown mode {mode!r}", "expected": expected})
            return
        if len(sequences) > BATCH_LIMIT:
            self._send(400, {"error": f"batch limit {BATCH_LIMIT} exceeded "
                                      f"({len(sequences)} sequences)", "expected": expected})
            return
        arr = np.asarray(sequences, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[1] != m.k or arr.shape[2] != m.frame_dim:
            self._send(400, {"error": f"sequence shape mismatch, got {list(arr.shape)}",
                             "expected": expected})
            return
        probs = _soft_or_hard(forward_probs(m, arr, weighted=False), mode)
        self._send(200, {"probs": [[float(x) for x in row] for row in probs]})


class ModelService:
    """A running prediction service; weights never leave the process."""

    def __init__(self, server: ThreadingHTTPServer, thread: threading.Thread):
        self._server = server
        self._thread = thread
        host, port = server.server_address[:2]
        self.url = f"http://{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=5)
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def start_service(model: TargetModel, host: str = "127.0.0.1", port: int = 0) -> ModelService:
    handler = type("_BoundHandler", (_Handler,), {"model": model})
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ModelService(server, thread)


# ---------------------------------------------------------------------------
# unified teacher access (dump file or endpoint)


class PredictionClient:
    """Fetch black-box predictions from a dump file or a live endpoint.

    Both routes yield identical float32 arrays, so adaptation results do not
    depend on which one served the teacher.
    """

    def __init__(self, source: str | Path):
        self._url = None
        self._dump = None
        src = str(source)
        if src.startswith("http://") or src.startswith("https://"):
            self._url = src.rstrip("/")
        else:
            self._dump, self._dump_classes = read_prediction_dump(source)

    def meta(self) -> dict:
        if self._url is None:
            return {"classes": self._dump_classes}
        note_route("/meta")
        with urllib.request.urlopen(f"{self._url}/meta") as resp:
            return json.loads(resp.read())

    def predict(self, sequences: np.ndarray, mode: str = "soft") -> np.ndarray:
        if self._url is None:
            raise DataError("prediction dump cannot answer ad-hoc queries; use an endpoint")
        note_route("/predict")
        body = json.dumps({
            "mode": mode,
            "sequences": [[[float(x) for x in fr] for fr in seq] for seq in sequences],
        }).encode("utf-8")
        req = urllib.request.Request(
            f"{self._url}/predict", data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as e:
            detail = e.read().decode("utf-8", errors="replace")
            raise DataError(f"prediction service rejected the request: {detail}") from None
        return np.asarray(payload["probs"], dtype=np.float32)

    def fetch_all(self, ids: list[str], frames: np.ndarray, mode: str = "soft") -> dict[str, np.ndarray]:
        """Teacher predictions for every video, keyed by id."""
        if self._dump is not None:
            missing = [v for v in ids if v not in self._dump]
            if missing:
                raise DataError(f"prediction dump missing ids: {', '.join(sorted(missing)[:5])}")
            rows = {v: self._dump[v] for v in ids}
            if mode == "hard":
                rows = {v: _soft_or_hard(p[None, :], "hard")[0] for v, p in rows.items()}
            return rows
        out = {}
        for start in range(0, len(ids), BATCH_LIMIT):
            chunk_ids = ids[start:start + BATCH_LIMIT]
            probs = self.predict(frames[start:start + BATCH_LIMIT], mode=mode)
            for vid, row in zip(chunk_ids, probs):
                out[vid] = row
        return out
