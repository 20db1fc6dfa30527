"""Linear-probe evaluation, diagnostics and CSV exporters."""
from __future__ import annotations

import io
from typing import Mapping

import numpy as np
from scipy.stats import spearmanr

from .correlation import CorrelationRecord, pairwise_distance_map
from .data import Dataset
from .ssl import EncoderModel, forward, represent

FEATURE_SOURCES = ("backbone", "projection")


def encode(encoder: EncoderModel, samples: np.ndarray, features: str = "backbone") -> np.ndarray:
    if features == "backbone":
        return represent(encoder, samples)
    if features == "projection":
        return forward(encoder, samples)[0]
    raise ValueError(f"features must be one of {FEATURE_SOURCES}")


def _check_labels(ds: Dataset, num_classes: int, name: str) -> np.ndarray:
    if ds.labels is None:
        raise ValueError(f"{name} set has no labels")
    y = np.asarray(ds.labels)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"{name} labels out of range [0, {num_classes})")
    return y


def linear_probe(encoder: EncoderModel, train: Dataset, test: Dataset, epochs: int = 100,
                 lr: float = 0.5, features: str = "backbone", num_classes: int | None = None) -> float:
    """Top-1 test accuracy of a softmax classifier on frozen encoder features.

    Features are standardized with train-set statistics, the classifier starts
    from zero and is fit by full-batch gradient descent on cross-entropy.
    """
    k = num_classes or max(train.num_classes or 0, test.num_classes or 0)
    y_train = _check_labels(train, k, "train")
    y_test = _check_labels(test, k, "test")
    f_train = encode(encoder, train.samples, features)
    f_test = encode(encoder, test.samples, features)
    mu = f_train.mean(axis=0)
    sd = f_train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    f_train = (f_train - mu) / sd
    f_test = (f_test - mu) / sd

    n, dim = f_train.shape
    w = np.zeros((dim, k))
    b = np.zeros(k)
    onehot = np.eye(k)[y_train]
    for _ in range(epochs):
        logits = f_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (f_train.T @ g)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(f_test @ w + b, axis=1)
    return float(np.mean(pred == y_test))


def make_probe_evaluator(train: Dataset, test: Dataset, epochs: int = 100, lr: float = 0.5,
                         features: str = "backbone"):
    """Evaluator callback for ``run_training``: probe accuracy per client."""

    def evaluate(round_index, clients):
        return {c.client_id: linear_probe(c.model, train, test, epochs, lr, features) for c in clients}

    return evaluate


def trace_accuracy_correlation(history) -> float:
    """Spearman correlation of mean trace(R_bar) vs mean probe accuracy at checkpoints."""
    traces, accs = [], []
    for rep in history:
        acc = rep.mean_probe()
        if acc is not None:
            traces.append(rep.mean_trace())
            accs.append(acc)
    return rank_correlation(traces, accs)


def rank_correlation(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("sequences differ in length")
    if len(np.unique(x)) < 2 or len(np.unique(y)) < 2:
        raise ValueError("rank correlation needs at least 2 distinct values in each sequence")
    return float(spearmanr(x, y).statistic)


def export_heatmap_data(records: Mapping[int, list[CorrelationRecord]], rounds) -> str:
    """Long-format CSV ``round,client_i,client_j,distance`` with i < j."""
    out = io.StringIO()
    out.write("round,client_i,client_j,distance\n")
    for t in rounds:
        if t not in records:
            raise KeyError(f"round {t} not present in the record history")
        recs = sorted(records[t], key=lambda r: r.client_id)
        dist = pairwise_distance_map(recs)
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                out.write(f"{t},{recs[i].client_id},{recs[j].client_id},{float(dist[i, j])!r}\n")
    return out.getvalue()


def export_embeddings(encoder: EncoderModel, dataset: Dataset, sample_count: int, seed: int,
                      features: str = "projection") -> str:
    """CSV ``label,e0,...`` for a deterministic subsample of ``dataset``."""
    if sample_count > len(dataset):
        raise ValueError(f"sample_count {sample_count} exceeds dataset size {len(dataset)}")
    dim = encoder.projection_dim if features == "projection" else encoder.representation_dim
    out = io.StringIO()
    out.write(",".join(["label", *(f"e{i}" for i in range(dim))]) + "\n")
    if sample_count == 0:
        return out.getvalue()
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), sample_count, replace=False))
    emb = encode(encoder, dataset.samples[idx], features)
    labels = dataset.labels[idx] if dataset.labels is not None else [""] * len(idx)
    for y, row in zip(labels, emb):
        out.write(",".join([str(y), *(repr(float(v)) for v in row)]) + "\n")
    return out.getvalue()
