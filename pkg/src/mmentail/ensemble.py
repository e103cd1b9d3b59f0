"""Engineered-feature decision tree over text, entailment, image, and domain cues.

Nine feature groups per pair: four token lengths, the 3-way entailment code and
its probability, raw image-feature cosine, and one-hot claim/doc image domains.
A depth-bounded CART tree with gini splits does the 5-way classification.

Split selection compares integer-scaled impurity decreases exactly (no float
rounding), so refitting on the same data always yields the identical tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import ClaimDocumentPair, Dataset, DataFormatError, ImageFeatureStore, \
    Label5, LABELS5, extract_domain
from .text_prep import tokenize


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """dot(u, v) / (|u| |v|); 0 when either norm is 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainEncoder:
    """Sorted domain vocabulary from the training split; unseen maps to all-zero."""
    vocabulary: tuple[str, ...]

    def encode(self, domain: str) -> np.ndarray:
        vec = np.zeros(len(self.vocabulary), dtype=np.float64)
        try:
            vec[self.vocabulary.index(domain)] = 1.0
        except ValueError:
            pass
        return vec


def fit_domain_encoder(train: Dataset) -> DomainEncoder:
    domains = set()
    for pair in train:
        for url in (pair.claim_image_url, pair.doc_image_url):
            domain = extract_domain(url)
            if domain:
                domains.add(domain)
    return DomainEncoder(vocabulary=tuple(sorted(domains)))


@dataclass(frozen=True)
class FeatureRecord:
    len_claim_text: int
    len_claim_ocr: int
    len_doc_text: int
    len_doc_ocr: int
    entail_code: int
    entail_prob: float
    image_cosine: float
    claim_domain_onehot: np.ndarray
    doc_domain_onehot: np.ndarray

    def __post_init__(self):
        for name in ("len_claim_text", "len_claim_ocr", "len_doc_text", "len_doc_ocr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.entail_code not in (0, 1, 2):
            raise ValueError(f"entail_code must be 0, 1, or 2, got {self.entail_code}")
        for vec in (self.claim_domain_onehot, self.doc_domain_onehot):
            if np.count_nonzero(vec) > 1:
                raise ValueError("one-hot vector has more than one bit set")

    def to_vector(self, include_domains: bool = True) -> np.ndarray:
        scalars = np.array([self.len_claim_text, self.len_claim_ocr,
                            self.len_doc_text, self.len_doc_ocr,
                            self.entail_code, self.entail_prob,
                            self.image_cosine], dtype=np.float64)
        if not include_domains:
            return scalars
        return np.concatenate([scalars, self.claim_domain_onehot,
                               self.doc_domain_onehot])


SCALAR_FEATURE_NAMES = ("len_claim_text", "len_claim_ocr", "len_doc_text",
                        "len_doc_ocr", "entail_code", "entail_prob", "image_cosine")


def feature_names(encoder: DomainEncoder, include_domains: bool = True) -> list[str]:
    names = list(SCALAR_FEATURE_NAMES)
    if include_domains:
        names += [f"claim_domain={d}" for d in encoder.vocabulary]
        names += [f"doc_domain={d}" for d in encoder.vocabulary]
    return names


def extract_features(pair: ClaimDocumentPair, predictor, store: ImageFeatureStore,
                     encoder: DomainEncoder) -> FeatureRecord:
    """predictor is anything with .predict(pair) -> EntailmentPrediction."""
    pred = predictor.predict(pair)
    return FeatureRecord(
        len_claim_text=len(tokenize(pair.claim_text)),
        len_claim_ocr=len(tokenize(pair.claim_ocr)),
        len_doc_text=len(tokenize(pair.doc_text)),
        len_doc_ocr=len(tokenize(pair.doc_ocr)),
        entail_code=pred.numeric_code,
        entail_prob=pred.top_probability,
        image_cosine=cosine_similarity(store[pair.claim_image_id],
                                       store[pair.doc_image_id]),
        claim_domain_onehot=encoder.encode(extract_domain(pair.claim_image_url)),
        doc_domain_onehot=encoder.encode(extract_domain(pair.doc_image_url)),
    )


def write_feature_csv(path: str, rows: Sequence[tuple[str, FeatureRecord]],
                      encoder: DomainEncoder) -> None:
    """One row per pair: pair_id, the 7 scalar features, expanded one-hots."""
    header = ["pair_id"] + feature_names(encoder)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for pair_id, rec in rows:
            vec = rec.to_vector()
            cells = [pair_id] + [_csv_num(x) for x in vec]
            fh.write(",".join(cells) + "\n")


def _csv_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# ---------------------------------------------------------------------------
# CART decision tree
# ---------------------------------------------------------------------------

def gini(counts: Sequence[int]) -> float:
    """1 - sum of squared class proportions."""
    total = int(np.sum(counts))
    if total == 0:
        raise ValueError("empty node")
    props = np.asarray(counts, dtype=np.float64) / total
    return float(1.0 - np.sum(props * props))


@dataclass
class TreeNode:
    counts: tuple[int, ...]               # per Label5 canonical index
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def prediction(self) -> Label5:
        # majority class, ties to the lowest canonical index
        return LABELS5[int(np.argmax(self.counts))]

    @property
    def gini(self) -> float:
        return gini(self.counts)


@dataclass
class DecisionTree:
    root: TreeNode
    max_depth: int
    n_features: int

    def depth(self) -> int:
        def walk(node: TreeNode) -> int:
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)


def _class_counts(y: np.ndarray) -> tuple[int, ...]:
    return tuple(int(c) for c in np.bincount(y, minlength=len(LABELS5)))


def _sq_sum(y: np.ndarray) -> int:
    return int(np.sum(np.bincount(y, minlength=len(LABELS5)).astype(object) ** 2))


def _best_split(X: np.ndarray, y: np.ndarray):
    """Exact search: max impurity decrease, ties to lowest feature then threshold.

    For a split into (l, r) of sizes (nl, nr), maximizing the gini decrease is
    equivalent to maximizing sum(cl^2)/nl + sum(cr^2)/nr; comparisons are done
    by integer cross-multiplication so equal gains tie exactly.
    """
    n = len(y)
    parent_sq = _sq_sum(y)
    best = None     # (score_num, score_den, feature, threshold, mask)
    for j in range(X.shape[1]):
        col = X[:, j]
        values = np.unique(col)
        for lo, hi in zip(values[:-1], values[1:]):
            t = (lo + hi) / 2.0
            mask = col <= t
            nl = int(mask.sum())
            nr = n - nl
            if nl == 0 or nr == 0:
                continue
            num = nr * _sq_sum(y[mask]) + nl * _sq_sum(y[~mask])
            den = nl * nr
            # positive gain: num/den > parent_sq/n, exactly
            if num * n <= parent_sq * den:
                continue
            if best is not None and num * best[1] <= best[0] * den:
                continue    # not strictly better; earlier feature/threshold kept
            best = (num, den, j, t, mask)
    if best is None:
        return None
    return best[2], best[3], best[4]


def tree_train(records: Sequence[tuple[FeatureRecord, Label5]],
               max_depth: int = 8, include_domains: bool = True) -> DecisionTree:
    if not records:
        raise ValueError("no training records")
    X = np.stack([rec.to_vector(include_domains) for rec, _ in records])
    y = np.array([LABELS5.index(label) for _, label in records], dtype=np.int64)
    return tree_train_xy(X, y, max_depth)


def tree_train_xy(X: np.ndarray, y: np.ndarray, max_depth: int = 8) -> DecisionTree:
    """CART on an already-built feature matrix (rows) and Label5 indices."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError(f"bad training shapes {X.shape}, {y.shape}")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")

    def grow(X_n: np.ndarray, y_n: np.ndarray, depth: int) -> TreeNode:
        counts = _class_counts(y_n)
        node = TreeNode(counts=counts)
        if depth >= max_depth or len(np.unique(y_n)) == 1:
            return node
        split = _best_split(X_n, y_n)
        if split is None:
            return node
        j, t, mask = split
        node.feature = j
        node.threshold = t
        node.left = grow(X_n[mask], y_n[mask], depth + 1)
        node.right = grow(X_n[~mask], y_n[~mask], depth + 1)
        return node

    return DecisionTree(root=grow(X, y, 0), max_depth=max_depth,
                        n_features=X.shape[1])


def tree_predict(tree: DecisionTree, record) -> tuple[Label5, np.ndarray]:
    """Route by thresholds (<= goes left); returns (majority label, count distribution)."""
    if isinstance(record, FeatureRecord):
        vec = record.to_vector(True)
        if vec.shape[0] != tree.n_features:
            vec = record.to_vector(False)
    else:
        vec = np.asarray(record, dtype=np.float64)
    if vec.shape != (tree.n_features,):
        raise ValueError(f"expected {tree.n_features} features, got {vec.shape}")
    node = tree.root
    while not node.is_leaf:
        node = node.left if vec[node.feature] <= node.threshold else node.right
    counts = np.asarray(node.counts, dtype=np.float64)
    return node.prediction, counts / counts.sum()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TREE_SCHEMA_VERSION = 1


def tree_to_json(tree: DecisionTree, encoder: DomainEncoder | None = None,
                 include_domains: bool = True) -> str:
    nodes: list[dict] = []

    def emit(node: TreeNode) -> int:
        idx = len(nodes)
        nodes.append({})
        rec: dict = {"counts": list(node.counts)}
        if not node.is_leaf:
            rec["feature"] = node.feature
            rec["threshold"] = node.threshold
            rec["left"] = emit(node.left)
            rec["right"] = emit(node.right)
        nodes[idx] = rec
        return idx

    emit(tree.root)
    doc = {"schema_version": TREE_SCHEMA_VERSION, "max_depth": tree.max_depth,
           "n_features": tree.n_features, "include_domains": include_domains,
           "domains": list(encoder.vocabulary) if encoder else [],
           "nodes": nodes}
    return json.dumps(doc, sort_keys=True)


def tree_from_json(text: str) -> tuple[DecisionTree, DomainEncoder, bool]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"bad tree JSON: {exc}") from None
    if doc.get("schema_version") != TREE_SCHEMA_VERSION:
        raise DataFormatError(f"unsupported tree schema {doc.get('schema_version')!r}")
    nodes = doc["nodes"]

    def build(idx: int) -> TreeNode:
        rec = nodes[idx]
        node = TreeNode(counts=tuple(rec["counts"]))
        if "feature" in rec:
            node.feature = rec["feature"]
            node.threshold = rec["threshold"]
            node.left = build(rec["left"])
            node.right = build(rec["right"])
        return node

    tree = DecisionTree(root=build(0), max_depth=doc["max_depth"],
                        n_features=doc["n_features"])
    return tree, DomainEncoder(vocabulary=tuple(doc["domains"])), \
        bool(doc["include_domains"])
