"""Frozen-encoder embeddings, linear probing and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from miae.errors import ProbeError, ShapeError
from miae.model import FoldClassifier, MiAE, MiAEEncoder, collate, pool
from miae.structure_io import ProteinBackbone

PROBE_GRID = (100.0, 10.0, 1.0, 0.1, 0.01, 0.001)


@dataclass
class EmbeddingMatrix:
    ids: list
    vectors: np.ndarray
    pooling: str = "mean"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.ids):
            raise ShapeError(f"{len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding matrix has non-finite entries")

    def save(self, prefix) -> None:
        """Write ``<prefix>.npy`` and the id sidecar ``<prefix>.ids.txt``."""
        prefix = Path(prefix)
        np.save(prefix.with_suffix(".npy"), self.vectors)
        prefix.with_suffix(".ids.txt").write_text(
            f"# pooling={self.pooling}\n" + "".join(f"{i}\n" for i in self.ids))

    @classmethod
    def load(cls, prefix) -> "EmbeddingMatrix":
        prefix = Path(prefix)
        lines = prefix.with_suffix(".ids.txt").read_text().splitlines()
        pooling = lines[0].split("=", 1)[1] if lines and lines[0].startswith("#") else "mean"
        ids = [ln for ln in lines if not ln.startswith("#")]
        return cls(ids, np.load(prefix.with_suffix(".npy")), pooling)

    def take(self, index) -> "EmbeddingMatrix":
        index = np.asarray(index)
        return EmbeddingMatrix([self.ids[i] for i in index], self.vectors[index], self.pooling)


def _encoder(model) -> MiAEEncoder:
    if isinstance(model, (MiAE, FoldClassifier)):
        return model.encoder
    return model


@torch.no_grad()
def embed_many(backbones: list[ProteinBackbone], model, pooling: str = "mean",
               batch_size: int = 32) -> EmbeddingMatrix:
    """Pooled encoder outputs on unmasked inputs."""
    encoder = _encoder(model)
    encoder.eval()
    dtype = encoder.init_embedding.dtype
    chunks = []
    for i in range(0, len(backbones), batch_size):
        batch = collate(backbones[i:i + batch_size], dtype=dtype, max_length=encoder.cfg.max_length)
        latents, mask = encoder(batch)
        chunks.append(pool(latents, mask, pooling).double().numpy())
    return EmbeddingMatrix([b.id for b in backbones], np.concatenate(chunks), pooling)


def embed(b: ProteinBackbone, model, pooling: str = "mean") -> np.ndarray:
    return embed_many([b], model, pooling).vectors[0]


@dataclass
class ProbeResult:
    classifier: LogisticRegression
    scaler: StandardScaler
    C: float
    val_accuracy: float
    grid_accuracy: dict

    def predict(self, x) -> np.ndarray:
        return self.classifier.predict(self.scaler.transform(np.asarray(x)))


def linear_probe(train_x, train_y, val_x, val_y, grid=PROBE_GRID, tol: float = 1e-6,
                 max_iter: int = 1000) -> ProbeResult:
    """Standardize with train statistics, fit L2 multinomial logistic
    regression by L-BFGS for each inverse-regularization value ``C`` in
    ``grid`` and keep the best on validation accuracy (ties: smaller C)."""
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    classes, counts = np.unique(train_y, return_counts=True)
    if len(classes) < 2:
        raise ProbeError("linear probing needs at least two classes in the training split")
    if np.any(counts < 2):
        raise ProbeError(f"class {classes[np.argmin(counts)]!r} has a single training sample")
    scaler = StandardScaler().fit(train_x)
    xt, xv = scaler.transform(train_x), scaler.transform(val_x)

    best = None
    grid_acc = {}
    for C in sorted(grid):
        clf = LogisticRegression(C=C, solver="lbfgs", tol=tol, max_iter=max_iter)
        clf.fit(xt, train_y)
        acc = float(np.mean(clf.predict(xv) == np.asarray(val_y)))
        grid_acc[C] = acc
        if best is None or acc > best[0]:
            best = (acc, C, clf)
    acc, C, clf = best
    return ProbeResult(classifier=clf, scaler=scaler, C=C, val_accuracy=acc, grid_accuracy=grid_acc)


def classification_metrics(pred, true, labels=None) -> dict:
    """Accuracy and macro-F1.

    ``macro_f1`` averages over classes present in ``true`` or ``pred``;
    ``macro_f1_all`` averages over the full ``labels`` space (absent classes
    count as 0) and is only reported when ``labels`` is given.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    if len(true) == 0:
        raise ShapeError("cannot score an empty prediction set")
    present = np.union1d(np.unique(true), np.unique(pred))
    f1 = {c: _f1(pred, true, c) for c in present}
    # exact rational arithmetic on counts, rounded once
    out = {
        "accuracy": float(Fraction(int(np.sum(pred == true)), len(true))),
        "macro_f1": float(sum(f1.values()) / len(f1)),
        "n": int(len(true)),
    }
    if labels is not None:
        labels = list(labels)
        out["macro_f1_all"] = float(sum(f1.get(c, Fraction(0)) for c in labels) / len(labels))
    return out


def _f1(pred, true, c) -> Fraction:
    tp = int(np.sum((pred == c) & (true == c)))
    fp = int(np.sum((pred == c) & (true != c)))
    fn = int(np.sum((pred != c) & (true == c)))
    denom = 2 * tp + fp + fn
    return Fraction(2 * tp, denom) if denom else Fraction(0)
