"""Evaluation metrics, per-class distribution statistics, and bias probes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .corpus import Dataset, ImageFeatureStore, Label5, LABELS5, DataFormatError
from .ensemble import cosine_similarity
from .optim import OptimizerState, adam_step, minibatches
from .text_prep import EmbeddingTable, embed_sequence, tokenize


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def per_class_prf(golds: Sequence, preds: Sequence,
                  labels: Sequence | None = None) -> dict:
    """Per-class precision/recall/F1/support; all 0 where undefined."""
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} golds vs {len(preds)} preds")
    if not golds:
        raise ValueError("empty evaluation")
    if labels is None:
        labels = _canonical_labels(list(golds) + list(preds))
    out = {}
    for label in labels:
        tp = sum(1 for g, p in zip(golds, preds) if g == label and p == label)
        fp = sum(1 for g, p in zip(golds, preds) if g != label and p == label)
        fn = sum(1 for g, p in zip(golds, preds) if g == label and p != label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
        out[label] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    return out


def weighted_f1(golds: Sequence, preds: Sequence, labels: Sequence | None = None) -> float:
    """Per-class F1 averaged with gold-class support weights."""
    prf = per_class_prf(golds, preds, labels)
    total = sum(row["support"] for row in prf.values())
    return sum(row["f1"] * row["support"] for row in prf.values()) / total


def accuracy(golds: Sequence, preds: Sequence) -> float:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} golds vs {len(preds)} preds")
    return sum(1 for g, p in zip(golds, preds) if g == p) / len(golds)


def confusion_matrix(golds: Sequence, preds: Sequence,
                     labels: Sequence | None = None) -> tuple[list, np.ndarray]:
    """Rows are gold labels, columns predictions, in canonical label order."""
    if labels is None:
        labels = _canonical_labels(list(golds) + list(preds))
    index = {label: i for i, label in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for g, p in zip(golds, preds):
        mat[index[g], index[p]] += 1
    return list(labels), mat


def _canonical_labels(seen: list):
    from .corpus import Label3, LABELS3
    if all(isinstance(x, Label5) for x in seen):
        return list(LABELS5)
    if all(isinstance(x, Label3) for x in seen):
        return list(LABELS3)
    return sorted(set(seen), key=repr)


METRICS_SCHEMA_VERSION = 1


def metrics_dict(golds: Sequence, preds: Sequence,
                 labels: Sequence | None = None) -> dict:
    """JSON-ready evaluation summary: accuracy, weighted F1, P/R/F1, confusion."""
    names, mat = confusion_matrix(golds, preds, labels)
    prf = per_class_prf(golds, preds, names)
    as_str = [lab.value if hasattr(lab, "value") else str(lab) for lab in names]
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "n_pairs": len(golds),
        "accuracy": accuracy(golds, preds),
        "weighted_f1": weighted_f1(golds, preds, names),
        "labels": as_str,
        "per_class": {s: prf[lab] for s, lab in zip(as_str, names)},
        "confusion": mat.tolist(),
    }


def write_metrics_json(path: str, metrics: dict) -> None:
    """Sorted-key, indented JSON; identical metrics give identical bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(metrics, sort_keys=True, indent=2))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Distribution statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistStats:
    min: float
    max: float
    mean: float
    median: float


def dist_stats(values: Sequence[float]) -> DistStats:
    if not len(values):
        raise ValueError("no values")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    n = arr.shape[0]
    # even count: mean of the two middle values
    median = float(arr[n // 2]) if n % 2 else float(0.5 * (arr[n // 2 - 1] + arr[n // 2]))
    return DistStats(min=float(arr[0]), max=float(arr[-1]),
                     mean=float(arr.mean()), median=median)


def word_overlap_ratio(q_text: str, d_text: str) -> float:
    """|unique claim tokens shared with document| / |unique claim tokens|."""
    q = set(tokenize(q_text))
    if not q:
        return 0.0
    d = set(tokenize(d_text))
    return len(q & d) / len(q)


def per_class_stats(ds: Dataset, quantity: Callable) -> dict[Label5, DistStats]:
    by_class: dict[Label5, list[float]] = {label: [] for label in LABELS5}
    for pair in ds:
        if pair.label is None:
            raise DataFormatError(f"pair {pair.id!r} is unlabeled")
        by_class[pair.label].append(float(quantity(pair)))
    return {label: dist_stats(vals) for label, vals in by_class.items() if vals}


def overlap_quantity(pair) -> float:
    return word_overlap_ratio(pair.claim_text, pair.doc_text)


def claim_len_quantity(pair) -> float:
    return len(tokenize(pair.claim_text))


def doc_len_quantity(pair) -> float:
    return len(tokenize(pair.doc_text))


def claim_ocr_len_quantity(pair) -> float:
    return len(tokenize(pair.claim_ocr))


def doc_ocr_len_quantity(pair) -> float:
    return len(tokenize(pair.doc_ocr))


def image_cosine_quantity(store: ImageFeatureStore) -> Callable:
    def quantity(pair) -> float:
        return cosine_similarity(store[pair.claim_image_id], store[pair.doc_image_id])
    return quantity


def domain_label_distribution(ds: Dataset) -> dict[str, dict[str, dict[Label5, int]]]:
    """Counts per image-URL domain and label, for claim and doc sides separately."""
    from .corpus import extract_domain
    out: dict[str, dict[str, dict[Label5, int]]] = {"claim": {}, "doc": {}}
    for pair in ds:
        if pair.label is None:
            raise DataFormatError(f"pair {pair.id!r} is unlabeled")
        for side, url in (("claim", pair.claim_image_url), ("doc", pair.doc_image_url)):
            domain = extract_domain(url)
            row = out[side].setdefault(domain, {label: 0 for label in LABELS5})
            row[pair.label] += 1
    return out


# ---------------------------------------------------------------------------
# Hypothesis-only probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    gru_dim: int = 300
    image_proj_dim: int = 512
    hidden_dim: int = 300
    n_classes: int = 5
    claim_max_len: int = 40
    batch_size: int = 32
    epochs: int = 12
    lr: float = 1e-3


class ProbeModel:
    """Claim-only classifier: GRU text encoder, optional image projection, 2 FC layers."""

    def __init__(self, config: ProbeConfig, embed_dim: int, image_dim: int | None,
                 rng: np.random.Generator):
        self.config = config
        self.with_image = image_dim is not None
        self.gru = nn.GruParams.init(rng, embed_dim, config.gru_dim)
        width = config.gru_dim
        if self.with_image:
            self.img_w = nn.he_uniform(rng, (image_dim, config.image_proj_dim), image_dim)
            self.img_b = np.zeros(config.image_proj_dim)
            width += config.image_proj_dim
        self.fc1_w = nn.he_uniform(rng, (width, config.hidden_dim), width)
        self.fc1_b = np.zeros(config.hidden_dim)
        self.fc2_w = nn.he_uniform(rng, (config.hidden_dim, config.n_classes), config.hidden_dim)
        self.fc2_b = np.zeros(config.n_classes)

    def params(self) -> dict[str, np.ndarray]:
        out = self.gru.named("gru")
        if self.with_image:
            out["img.w"] = self.img_w
            out["img.b"] = self.img_b
        out.update({"fc1.w": self.fc1_w, "fc1.b": self.fc1_b,
                    "fc2.w": self.fc2_w, "fc2.b": self.fc2_b})
        return out

    def forward(self, X_text: np.ndarray, X_img: np.ndarray | None):
        (_, final), gru_cache = nn.gru_forward(X_text, self.gru)
        if self.with_image:
            proj, img_cache = nn.dense(X_img, self.img_w, self.img_b, "none")
            feats = np.concatenate([final, proj], axis=1)
        else:
            img_cache = None
            feats = final
        h1, c1 = nn.dense(feats, self.fc1_w, self.fc1_b, "relu")
        logits, c2 = nn.dense(h1, self.fc2_w, self.fc2_b, "none")
        return logits, (gru_cache, img_cache, c1, c2)

    def backward(self, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        gru_cache, img_cache, c1, c2 = cache
        d_h1, d_fc2w, d_fc2b = nn.dense_backward(c2, d_logits)
        d_feats, d_fc1w, d_fc1b = nn.dense_backward(c1, d_h1)
        grads = {"fc1.w": d_fc1w, "fc1.b": d_fc1b, "fc2.w": d_fc2w, "fc2.b": d_fc2b}
        o = self.config.gru_dim
        d_final = d_feats[:, :o]
        if self.with_image:
            _, d_imgw, d_imgb = nn.dense_backward(img_cache, d_feats[:, o:])
            grads["img.w"] = d_imgw
            grads["img.b"] = d_imgb
        T = gru_cache[0].shape[1]
        zero_ctx = np.zeros((d_final.shape[0], T, o))
        _, gru_grads = nn.gru_backward(gru_cache, zero_ctx, d_final)
        grads.update({f"gru.{k}": v for k, v in gru_grads.items()})
        return grads


def probe_train_eval(train: Dataset, val: Dataset, mode: str, seed: int,
                     table: EmbeddingTable, store: ImageFeatureStore | None = None,
                     config: ProbeConfig | None = None) -> tuple[float, float]:
    """Train a hypothesis-only probe; returns (weighted F1, accuracy) on val.

    mode is "text_only" or "text_plus_image"; the latter needs a feature store.
    """
    if mode not in ("text_only", "text_plus_image"):
        raise ValueError(f"unknown probe mode {mode!r}")
    if not len(train) or not len(val):
        raise ValueError("empty dataset")
    config = config or ProbeConfig()
    with_image = mode == "text_plus_image"
    if with_image and store is None:
        raise ValueError("text_plus_image mode needs a feature store")

    def encode(ds: Dataset):
        X = np.stack([embed_sequence(tokenize(p.claim_text), table, config.claim_max_len)
                      for p in ds])
        XI = np.stack([store[p.claim_image_id] for p in ds]) if with_image else None
        y = np.array([LABELS5.index(p.label) for p in ds])
        return X, XI, y

    X_tr, XI_tr, y_tr = encode(train)
    X_va, XI_va, y_va = encode(val)
    rng = np.random.default_rng(seed)
    model = ProbeModel(config, table.dim, store.dim if with_image else None, rng)
    state = OptimizerState(lr=config.lr)
    for _ in range(config.epochs):
        for idx in minibatches(len(train), config.batch_size, rng):
            logits, cache = model.forward(X_tr[idx], None if XI_tr is None else XI_tr[idx])
            _, _, d_logits = nn.softmax_cross_entropy(logits, y_tr[idx])
            grads = model.backward(cache, d_logits)
            adam_step(model.params(), grads, state)
    logits, _ = model.forward(X_va, XI_va)
    pred_idx = logits.argmax(axis=1)
    golds = [LABELS5[i] for i in y_va]
    preds = [LABELS5[i] for i in pred_idx]
    return weighted_f1(golds, preds, LABELS5), accuracy(golds, preds)
