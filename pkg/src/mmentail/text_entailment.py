"""Three-way claim/document entailment over a similarity-matrix CNN.

Each side is embedded, self-attended, and run through its own GRU. The dot
products of the two context sequences form an interaction matrix that a small
conv/pool stack reduces to a flat feature vector for an MLP classifier.

The text-matching trunk (GRUs + conv stack) is factored out so the multimodal
network can reuse it as its text branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from . import nn
from .analysis import weighted_f1, accuracy
from .corpus import ClaimDocumentPair, Dataset, DataFormatError, Label3, LABELS3, \
    map_5way_to_3way
from .optim import OptimizerState, ReduceLROnPlateau, adam_step, minibatches, \
    EpochStats, TrainingLog
from .text_prep import EmbeddingTable, embed_sequence, tokenize

# numeric encoding used at the ensemble feature boundary, not internally
CODE_BY_LABEL3 = {Label3.INSUFFICIENT: 0, Label3.SUPPORT: 1, Label3.REFUTE: 2}
LABEL3_BY_CODE = {code: label for label, code in CODE_BY_LABEL3.items()}


@dataclass(frozen=True)
class MatchPyramidConfig:
    embed_dim: int = 50
    gru_dim: int = 50
    claim_max_len: int = 100
    doc_max_len: int = 1000
    conv_channels: tuple[int, int] = (16, 32)
    kernel_size: int = 3
    pool: tuple[int, int] = (5, 10)
    mlp_hidden: tuple[int, int] = (128, 64)
    n_classes: int = 3
    batch_size: int = 32
    max_epochs: int = 40
    patience: int = 5
    lr: float = 1e-3
    weight_decay: float = 1e-4

    def __post_init__(self):
        for name in ("embed_dim", "gru_dim", "claim_max_len", "doc_max_len",
                     "kernel_size", "n_classes", "batch_size", "max_epochs",
                     "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        feature_map_shape(self)   # raises if conv/pool stack collapses


def feature_map_shape(config: MatchPyramidConfig) -> tuple[int, int, int]:
    """Shape after the conv/pool stack on the full interaction matrix."""
    h, w = config.claim_max_len, config.doc_max_len
    p_h, p_w = config.pool
    for channels in config.conv_channels:
        h, w = h - config.kernel_size + 1, w - config.kernel_size + 1
        if h < 1 or w < 1:
            raise nn.ShapeError(f"conv collapses feature map to {h}x{w}")
        h, w = h // p_h, w // p_w
        if h < 1 or w < 1:
            raise nn.ShapeError(f"pool collapses feature map to {h}x{w}")
    return h, w, config.conv_channels[-1]


def flattened_dim(config: MatchPyramidConfig) -> int:
    h, w, c = feature_map_shape(config)
    return h * w * c


# ---------------------------------------------------------------------------
# Shared text-matching trunk
# ---------------------------------------------------------------------------

@dataclass
class TrunkParams:
    """GRU per side plus the conv stack over the interaction matrix."""
    gru_q: nn.GruParams
    gru_d: nn.GruParams
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, config: MatchPyramidConfig) -> "TrunkParams":
        k = config.kernel_size
        c1, c2 = config.conv_channels
        return cls(
            gru_q=nn.GruParams.init(rng, config.embed_dim, config.gru_dim),
            gru_d=nn.GruParams.init(rng, config.embed_dim, config.gru_dim),
            conv1_w=nn.he_uniform(rng, (k, k, 1, c1), k * k * 1),
            conv1_b=np.zeros(c1),
            conv2_w=nn.he_uniform(rng, (k, k, c1, c2), k * k * c1),
            conv2_b=np.zeros(c2),
        )

    def named(self, prefix: str = "trunk") -> dict[str, np.ndarray]:
        out = self.gru_q.named(f"{prefix}.gru_q")
        out.update(self.gru_d.named(f"{prefix}.gru_d"))
        out.update({f"{prefix}.conv1.w": self.conv1_w, f"{prefix}.conv1.b": self.conv1_b,
                    f"{prefix}.conv2.w": self.conv2_w, f"{prefix}.conv2.b": self.conv2_b})
        return out


def interaction_matrix(q_ctx: np.ndarray, d_ctx: np.ndarray) -> np.ndarray:
    """Pairwise dot products; entry (i, k) = q_ctx[i] . d_ctx[k]."""
    if q_ctx.shape[-1] != d_ctx.shape[-1]:
        raise nn.ShapeError(
            f"context dims differ: {q_ctx.shape[-1]} vs {d_ctx.shape[-1]}")
    return q_ctx @ d_ctx.swapaxes(-1, -2)


@dataclass
class TrunkOut:
    z: np.ndarray        # [B,f] flattened conv features
    q_ctx: np.ndarray    # [B,m,o]
    d_ctx: np.ndarray    # [B,n,o]
    q_g: np.ndarray      # [B,o] final claim state
    d_g: np.ndarray      # [B,o]
    cache: tuple


def trunk_forward(params: TrunkParams, A_q: np.ndarray, A_d: np.ndarray,
                  pool: tuple[int, int]) -> TrunkOut:
    """A_q/A_d are embedded+self-attended inputs, [B,m,j] and [B,n,j]."""
    (q_ctx, q_g), cache_q = nn.gru_forward(A_q, params.gru_q)
    (d_ctx, d_g), cache_d = nn.gru_forward(A_d, params.gru_d)
    S = interaction_matrix(q_ctx, d_ctx)
    c1, cache_c1 = nn.conv2d_valid(S[..., None], params.conv1_w, params.conv1_b)
    mask1 = c1 > 0
    r1 = c1 * mask1
    p1, cache_p1 = nn.maxpool2d(r1, pool)
    c2, cache_c2 = nn.conv2d_valid(p1, params.conv2_w, params.conv2_b)
    mask2 = c2 > 0
    r2 = c2 * mask2
    p2, cache_p2 = nn.maxpool2d(r2, pool)
    z = p2.reshape(p2.shape[0], -1)
    cache = (cache_q, cache_d, q_ctx, d_ctx, cache_c1, mask1, cache_p1,
             cache_c2, mask2, cache_p2, p2.shape)
    return TrunkOut(z=z, q_ctx=q_ctx, d_ctx=d_ctx, q_g=q_g, d_g=d_g, cache=cache)


def trunk_backward(params: TrunkParams, cache, d_z: np.ndarray,
                   d_q_ctx: np.ndarray | None = None,
                   d_d_ctx: np.ndarray | None = None,
                   d_q_g: np.ndarray | None = None,
                   d_d_g: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Grads for trunk params given downstream grads; extra terms come from
    branches that tap the context sequences or final states directly."""
    (cache_q, cache_d, q_ctx, d_ctx, cache_c1, mask1, cache_p1,
     cache_c2, mask2, cache_p2, p2_shape) = cache
    d_p2 = d_z.reshape(p2_shape)
    d_r2 = nn.maxpool2d_backward(cache_p2, d_p2)
    d_c2 = d_r2 * mask2
    d_p1, d_conv2_w, d_conv2_b = nn.conv2d_valid_backward(cache_c2, d_c2)
    d_r1 = nn.maxpool2d_backward(cache_p1, d_p1)
    d_c1 = d_r1 * mask1
    d_S4, d_conv1_w, d_conv1_b = nn.conv2d_valid_backward(cache_c1, d_c1)
    d_S = d_S4[..., 0]
    dq = d_S @ d_ctx
    dd = d_S.swapaxes(-1, -2) @ q_ctx
    if d_q_ctx is not None:
        dq = dq + d_q_ctx
    if d_d_ctx is not None:
        dd = dd + d_d_ctx
    _, g_q = nn.gru_backward(cache_q, dq, d_q_g)
    _, g_d = nn.gru_backward(cache_d, dd, d_d_g)
    grads = {f"trunk.gru_q.{k}": v for k, v in g_q.items()}
    grads.update({f"trunk.gru_d.{k}": v for k, v in g_d.items()})
    grads.update({"trunk.conv1.w": d_conv1_w, "trunk.conv1.b": d_conv1_b,
                  "trunk.conv2.w": d_conv2_w, "trunk.conv2.b": d_conv2_b})
    return grads


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class MatchPyramidModel:
    config: MatchPyramidConfig
    trunk: TrunkParams
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    @property
    def f(self) -> int:
        return flattened_dim(self.config)

    @classmethod
    def init(cls, config: MatchPyramidConfig, seed: int) -> "MatchPyramidModel":
        rng = np.random.default_rng(seed)
        trunk = TrunkParams.init(rng, config)
        f = flattened_dim(config)
        h1, h2 = config.mlp_hidden
        return cls(
            config=config,
            trunk=trunk,
            mlp1_w=nn.he_uniform(rng, (f, h1), f),
            mlp1_b=np.zeros(h1),
            mlp2_w=nn.he_uniform(rng, (h1, h2), h1),
            mlp2_b=np.zeros(h2),
            out_w=nn.he_uniform(rng, (h2, config.n_classes), h2),
            out_b=np.zeros(config.n_classes),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = self.trunk.named("trunk")
        out.update({"mlp1.w": self.mlp1_w, "mlp1.b": self.mlp1_b,
                    "mlp2.w": self.mlp2_w, "mlp2.b": self.mlp2_b,
                    "out.w": self.out_w, "out.b": self.out_b})
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(values):
            raise DataFormatError("parameter names do not match this model")
        for name, arr in own.items():
            if arr.shape != values[name].shape:
                raise DataFormatError(
                    f"parameter {name}: shape {values[name].shape} != {arr.shape}")
            arr[...] = values[name]


def encode_text(text: str, table: EmbeddingTable, max_len: int) -> np.ndarray:
    """Tokenize, embed, self-attend over the actual tokens, zero-pad to max_len.

    Attention runs on the true-length matrix so padding never dilutes the
    averages; the zero suffix only fixes the batch shape.
    """
    tokens = tokenize(text)[:max_len]
    out = np.zeros((max_len, table.dim), dtype=np.float64)
    if tokens:
        E = np.stack([table.get(t) for t in tokens])
        A, _ = nn.self_attention(E)
        out[:len(tokens)] = A
    return out


def encode_pair(pair: ClaimDocumentPair, table: EmbeddingTable,
                config: MatchPyramidConfig) -> tuple[np.ndarray, np.ndarray]:
    return (encode_text(pair.claim_text, table, config.claim_max_len),
            encode_text(pair.doc_text, table, config.doc_max_len))


def _mp_logits(model: MatchPyramidModel, A_q: np.ndarray, A_d: np.ndarray):
    trunk_out = trunk_forward(model.trunk, A_q, A_d, model.config.pool)
    h1, c1 = nn.dense(trunk_out.z, model.mlp1_w, model.mlp1_b, "relu")
    h2, c2 = nn.dense(h1, model.mlp2_w, model.mlp2_b, "relu")
    logits, c3 = nn.dense(h2, model.out_w, model.out_b, "none")
    return logits, (trunk_out.cache, c1, c2, c3)


def _mp_backward(model: MatchPyramidModel, cache, d_logits: np.ndarray):
    trunk_cache, c1, c2, c3 = cache
    d_h2, d_ow, d_ob = nn.dense_backward(c3, d_logits)
    d_h1, d_m2w, d_m2b = nn.dense_backward(c2, d_h2)
    d_z, d_m1w, d_m1b = nn.dense_backward(c1, d_h1)
    grads = trunk_backward(model.trunk, trunk_cache, d_z)
    grads.update({"mlp1.w": d_m1w, "mlp1.b": d_m1b,
                  "mlp2.w": d_m2w, "mlp2.b": d_m2b,
                  "out.w": d_ow, "out.b": d_ob})
    return grads


def mp_forward(pair: ClaimDocumentPair, model: MatchPyramidModel,
               table: EmbeddingTable) -> np.ndarray:
    """Probability 3-vector in (support, refute, insufficient) order."""
    A_q, A_d = encode_pair(pair, table, model.config)
    logits, _ = _mp_logits(model, A_q[None], A_d[None])
    return nn.softmax(logits[0])


@dataclass(frozen=True)
class EntailmentPrediction:
    label: Label3
    probabilities: np.ndarray   # (support, refute, insufficient)

    @property
    def numeric_code(self) -> int:
        return CODE_BY_LABEL3[self.label]

    @property
    def top_probability(self) -> float:
        return float(self.probabilities[LABELS3.index(self.label)])


def prediction_from_probs(probs: np.ndarray) -> EntailmentPrediction:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,):
        raise DataFormatError(f"expected 3 probabilities, got shape {probs.shape}")
    if not np.isfinite(probs).all() or abs(probs.sum() - 1.0) > 1e-6:
        raise DataFormatError("probabilities must be finite and sum to 1")
    return EntailmentPrediction(label=LABELS3[int(probs.argmax())], probabilities=probs)


def mp_predict(pair: ClaimDocumentPair, model: MatchPyramidModel,
               table: EmbeddingTable) -> EntailmentPrediction:
    return prediction_from_probs(mp_forward(pair, model, table))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _three_way_labels(ds: Dataset) -> np.ndarray:
    idx = []
    for pair in ds:
        if pair.label is None:
            raise DataFormatError(f"pair {pair.id!r} is unlabeled")
        idx.append(LABELS3.index(map_5way_to_3way(pair.label)))
    return np.array(idx, dtype=np.int64)


def _encode_dataset(ds: Dataset, table: EmbeddingTable, config: MatchPyramidConfig):
    A_q = np.stack([encode_text(p.claim_text, table, config.claim_max_len) for p in ds])
    A_d = np.stack([encode_text(p.doc_text, table, config.doc_max_len) for p in ds])
    return A_q, A_d


def _eval_split(model, A_q, A_d, y, batch_size: int):
    losses = []
    preds = np.empty(len(y), dtype=np.int64)
    for start in range(0, len(y), batch_size):
        sl = slice(start, min(start + batch_size, len(y)))
        logits, _ = _mp_logits(model, A_q[sl], A_d[sl])
        loss, probs, _ = nn.softmax_cross_entropy(logits, y[sl])
        losses.append(loss * (sl.stop - start))
        preds[sl] = probs.argmax(axis=1)
    loss = float(np.sum(losses) / len(y))
    golds = [LABELS3[i] for i in y]
    guesses = [LABELS3[i] for i in preds]
    return loss, accuracy(golds, guesses), weighted_f1(golds, guesses, LABELS3)


def mp_train(train: Dataset, val: Dataset, config: MatchPyramidConfig,
             seed: int, table: EmbeddingTable) -> tuple[MatchPyramidModel, TrainingLog]:
    """Adam + cross-entropy; keeps the epoch with the best val weighted F1."""
    if not len(train) or not len(val):
        raise DataFormatError("empty dataset")
    y_tr = _three_way_labels(train)
    y_va = _three_way_labels(val)
    A_q_tr, A_d_tr = _encode_dataset(train, table, config)
    A_q_va, A_d_va = _encode_dataset(val, table, config)

    model = MatchPyramidModel.init(config, seed)
    rng = np.random.default_rng(seed + 1)
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    scheduler = ReduceLROnPlateau(state)
    entries: list[EpochStats] = []
    best_f1 = -1.0
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    stale = 0
    for epoch in range(config.max_epochs):
        batch_losses = []
        for idx in minibatches(len(train), config.batch_size, rng):
            logits, cache = _mp_logits(model, A_q_tr[idx], A_d_tr[idx])
            loss, _, d_logits = nn.softmax_cross_entropy(logits, y_tr[idx])
            grads = _mp_backward(model, cache, d_logits)
            adam_step(model.params(), grads, state)
            batch_losses.append(loss * len(idx))
        train_loss = float(np.sum(batch_losses) / len(train))
        val_loss, val_acc, val_f1 = _eval_split(
            model, A_q_va, A_d_va, y_va, config.batch_size)
        entries.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_loss=val_loss, val_acc=val_acc,
                                  val_weighted_f1=val_f1))
        scheduler.update(val_loss)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_params(best_params)
    return model, TrainingLog(entries=entries, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Predictor interface: fitted model or external prediction file
# ---------------------------------------------------------------------------

class EntailmentPredictor(Protocol):
    def predict(self, pair: ClaimDocumentPair) -> EntailmentPrediction: ...


@dataclass
class MatchPyramidPredictor:
    model: MatchPyramidModel
    table: EmbeddingTable

    def predict(self, pair: ClaimDocumentPair) -> EntailmentPrediction:
        return mp_predict(pair, self.model, self.table)


class ExternalPredictor:
    """Serves pre-computed 3-way predictions keyed by pair id."""

    def __init__(self, predictions: dict[str, EntailmentPrediction]):
        self.predictions = predictions

    def predict(self, pair: ClaimDocumentPair) -> EntailmentPrediction:
        if pair.id not in self.predictions:
            raise DataFormatError(f"no prediction for pair {pair.id!r}")
        return self.predictions[pair.id]

    @classmethod
    def load(cls, path: str) -> "ExternalPredictor":
        preds: dict[str, EntailmentPrediction] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"{path} line {lineno}: {exc}") from None
                try:
                    pair_id = rec["pair_id"]
                    label = Label3(rec["label"])
                    probs = np.asarray(rec["probabilities"], dtype=np.float64)
                except (KeyError, ValueError) as exc:
                    raise DataFormatError(f"{path} line {lineno}: {exc}") from None
                pred = prediction_from_probs(probs)
                if pred.label is not label and not np.isclose(
                        probs[LABELS3.index(label)], probs.max()):
                    raise DataFormatError(
                        f"{path} line {lineno}: label {label.value!r} is not an argmax")
                if pair_id in preds:
                    raise DataFormatError(f"{path} line {lineno}: duplicate pair_id")
                preds[pair_id] = EntailmentPrediction(label=label, probabilities=probs)
        return cls(preds)


def write_predictions_jsonl(path: str, rows: Iterable[tuple[str, str, np.ndarray]]) -> None:
    """Rows are (pair_id, label string, probability vector)."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair_id, label, probs in rows:
            rec = {"pair_id": pair_id, "label": label,
                   "probabilities": [float(p) for p in probs]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

CHECKPOINT_KIND = "text3"


def save_model(path: str, model: MatchPyramidModel) -> None:
    from .checkpoint import save_params
    from .config import config_to_kv
    save_params(path, CHECKPOINT_KIND, model.params(),
                meta={"config": config_to_kv(model.config)})


def load_model(path: str) -> MatchPyramidModel:
    from .checkpoint import load_params
    from .config import config_from_kv
    _, meta, params = load_params(path, expect_kind=CHECKPOINT_KIND)
    config = config_from_kv(MatchPyramidConfig, meta["config"])
    model = MatchPyramidModel.init(config, seed=0)
    model.set_params(params)
    return model
