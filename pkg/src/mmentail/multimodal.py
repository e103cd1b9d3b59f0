"""Five-way multimodal entailment network.

Three branches over a claim/document pair: the text-matching trunk's flattened
conv features, a fusion of visual-similarity scalars with cross-modal attention
vectors, and a hypothesis branch pairing the claim's final text state with its
projected image vector. Branch MLPs are merged by concatenation, batch-normed,
and classified over the five labels.

Raw image features enter through a frozen seeded projection (image_dim -> 512);
only the alignment maps, trunk, MLPs, batch norm, and output layer train.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import nn
from .analysis import weighted_f1, accuracy
from .corpus import ClaimDocumentPair, Dataset, DataFormatError, ImageFeatureStore, \
    Label5, LABELS5
from .optim import OptimizerState, ReduceLROnPlateau, adam_step, minibatches, \
    EpochStats, TrainingLog
from .text_entailment import MatchPyramidConfig, TrunkParams, trunk_forward, \
    trunk_backward, flattened_dim, encode_text
from .text_prep import EmbeddingTable


@dataclass(frozen=True)
class MultimodalConfig:
    image_dim: int = 2048
    image_proj_dim: int = 512
    embed_dim: int = 50
    gru_dim: int = 50
    claim_max_len: int = 100
    doc_max_len: int = 1000
    conv_channels: tuple[int, int] = (16, 32)
    kernel_size: int = 3
    pool: tuple[int, int] = (5, 10)
    mlp_dim: int = 256
    n_classes: int = 5
    batch_size: int = 32
    max_epochs: int = 80
    patience: int = 5
    lr: float = 1e-4
    weight_decay: float = 1e-4
    dropout: float = 0.2
    use_hypothesis_branch: bool = True
    use_q_cross: bool = True
    use_d_cross: bool = True

    def trunk_config(self) -> MatchPyramidConfig:
        return MatchPyramidConfig(
            embed_dim=self.embed_dim, gru_dim=self.gru_dim,
            claim_max_len=self.claim_max_len, doc_max_len=self.doc_max_len,
            conv_channels=self.conv_channels, kernel_size=self.kernel_size,
            pool=self.pool)

    @property
    def fusion_width(self) -> int:
        return self.mlp_dim * (3 if self.use_hypothesis_branch else 2)

    @property
    def branch_b_width(self) -> int:
        width = 2   # V and E scalars
        if self.use_q_cross:
            width += self.gru_dim
        if self.use_d_cross:
            width += self.gru_dim
        return width


# ---------------------------------------------------------------------------
# Visual matching
# ---------------------------------------------------------------------------

def visual_match(q_i: np.ndarray, d_i: np.ndarray) -> tuple[float, float]:
    """(V, E): cosine of the projected vectors and inverse euclidean closeness.

    V is 0 when either vector is zero; E = 1/(1+|q-d|) is always defined.
    """
    q_i = np.asarray(q_i, dtype=np.float64)
    d_i = np.asarray(d_i, dtype=np.float64)
    if q_i.shape != d_i.shape or q_i.ndim != 1:
        raise nn.ShapeError(f"shape mismatch: {q_i.shape} vs {d_i.shape}")
    nq = np.linalg.norm(q_i)
    nd = np.linalg.norm(d_i)
    v = 0.0 if nq == 0.0 or nd == 0.0 else float(q_i @ d_i / (nq * nd))
    e = float(1.0 / (1.0 + np.linalg.norm(q_i - d_i)))
    return v, e


def _l2_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; zero rows stay zero. Returns (normalized, norms)."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe, norms[..., 0]


def _l2_rows_backward(x: np.ndarray, y: np.ndarray, norms: np.ndarray,
                      d_y: np.ndarray) -> np.ndarray:
    safe = np.where(norms == 0.0, 1.0, norms)[..., None]
    d_x = (d_y - y * np.sum(d_y * y, axis=-1, keepdims=True)) / safe
    return np.where(norms[..., None] == 0.0, 0.0, d_x)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class MultimodalModel:
    config: MultimodalConfig
    proj_w: np.ndarray          # frozen [image_dim, image_proj_dim]
    trunk: TrunkParams
    xattn_q_w: np.ndarray       # doc image query over claim context
    xattn_q_b: np.ndarray
    xattn_d_w: np.ndarray       # claim image query over doc context
    xattn_d_b: np.ndarray
    mlp_a_w: np.ndarray
    mlp_a_b: np.ndarray
    mlp_b_w: np.ndarray
    mlp_b_b: np.ndarray
    mlp_c_w: np.ndarray
    mlp_c_b: np.ndarray
    bn: nn.BatchNormParams
    out_w: np.ndarray
    out_b: np.ndarray

    @classmethod
    def init(cls, config: MultimodalConfig, seed: int) -> "MultimodalModel":
        rng = np.random.default_rng(seed)
        p = config.image_proj_dim
        o = config.gru_dim
        m = config.mlp_dim
        f = flattened_dim(config.trunk_config())
        proj_w = nn.he_uniform(rng, (config.image_dim, p), config.image_dim)
        trunk = TrunkParams.init(rng, config.trunk_config())
        c_width = o + p
        return cls(
            config=config,
            proj_w=proj_w,
            trunk=trunk,
            xattn_q_w=nn.he_uniform(rng, (p, o), p),
            xattn_q_b=np.zeros(o),
            xattn_d_w=nn.he_uniform(rng, (p, o), p),
            xattn_d_b=np.zeros(o),
            mlp_a_w=nn.he_uniform(rng, (f, m), f),
            mlp_a_b=np.zeros(m),
            mlp_b_w=nn.he_uniform(rng, (config.branch_b_width, m),
                                  config.branch_b_width),
            mlp_b_b=np.zeros(m),
            mlp_c_w=nn.he_uniform(rng, (c_width, m), c_width),
            mlp_c_b=np.zeros(m),
            bn=nn.BatchNormParams.init(config.fusion_width),
            out_w=nn.he_uniform(rng, (config.fusion_width, config.n_classes),
                                config.fusion_width),
            out_b=np.zeros(config.n_classes),
        )

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters only; the image projection stays out."""
        out = self.trunk.named("trunk")
        out.update({
            "mlp_a.w": self.mlp_a_w, "mlp_a.b": self.mlp_a_b,
            "mlp_b.w": self.mlp_b_w, "mlp_b.b": self.mlp_b_b,
            "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
            "out.w": self.out_w, "out.b": self.out_b,
        })
        if self.config.use_q_cross:
            out["xattn_q.w"] = self.xattn_q_w
            out["xattn_q.b"] = self.xattn_q_b
        if self.config.use_d_cross:
            out["xattn_d.w"] = self.xattn_d_w
            out["xattn_d.b"] = self.xattn_d_b
        if self.config.use_hypothesis_branch:
            out["mlp_c.w"] = self.mlp_c_w
            out["mlp_c.b"] = self.mlp_c_b
        return out

    def all_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint needs, frozen and running state included."""
        out = dict(self.params())
        out["xattn_q.w"] = self.xattn_q_w
        out["xattn_q.b"] = self.xattn_q_b
        out["xattn_d.w"] = self.xattn_d_w
        out["xattn_d.b"] = self.xattn_d_b
        out["mlp_c.w"] = self.mlp_c_w
        out["mlp_c.b"] = self.mlp_c_b
        out["proj.w"] = self.proj_w
        out["bn.running_mean"] = self.bn.running_mean
        out["bn.running_var"] = self.bn.running_var
        return out

    def set_arrays(self, values: dict[str, np.ndarray]) -> None:
        own = self.all_arrays()
        if set(own) != set(values):
            raise DataFormatError("parameter names do not match this model")
        for name, arr in own.items():
            if arr.shape != values[name].shape:
                raise DataFormatError(
                    f"parameter {name}: shape {values[name].shape} != {arr.shape}")
            arr[...] = values[name]


def project_image(feature: np.ndarray, model: MultimodalModel) -> np.ndarray:
    """Frozen linear reduction of a raw image feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != model.config.image_dim:
        raise nn.ShapeError(
            f"feature dim {feature.shape[-1]} != image_dim {model.config.image_dim}")
    return feature @ model.proj_w


def cross_modal_attend(image_vec: np.ndarray, text_ctx: np.ndarray,
                       model: MultimodalModel, direction: str = "q") -> np.ndarray:
    """Attend over a text context with a projected image vector as the query.

    direction "q": doc-image query over the claim context (the q_cross term);
    direction "d": claim-image query over the doc context.
    """
    if direction == "q":
        w, b = model.xattn_q_w, model.xattn_q_b
    elif direction == "d":
        w, b = model.xattn_d_w, model.xattn_d_b
    else:
        raise ValueError(f"direction must be 'q' or 'd', got {direction!r}")
    query = image_vec @ w + b
    out, _ = nn.sdp_attention(query[None, :], text_ctx, text_ctx)
    return out[0]


@dataclass(frozen=True)
class FusionFeatures:
    V: float
    E: float
    q_cross: np.ndarray
    d_cross: np.ndarray


def fusion_features(pair: ClaimDocumentPair, model: MultimodalModel,
                    table: EmbeddingTable, store: ImageFeatureStore) -> FusionFeatures:
    """The branch-B inputs for one pair, computed at inference settings."""
    cfg = model.config
    qp = project_image(store[pair.claim_image_id], model)
    dp = project_image(store[pair.doc_image_id], model)
    v, e = visual_match(qp, dp)
    A_q = encode_text(pair.claim_text, table, cfg.claim_max_len)
    A_d = encode_text(pair.doc_text, table, cfg.doc_max_len)
    out = trunk_forward(model.trunk, A_q[None], A_d[None], cfg.pool)
    return FusionFeatures(
        V=v, E=e,
        q_cross=cross_modal_attend(dp, out.q_ctx[0], model, "q"),
        d_cross=cross_modal_attend(qp, out.d_ctx[0], model, "d"),
    )


# ---------------------------------------------------------------------------
# Forward / backward over batches
# ---------------------------------------------------------------------------

def _forward_batch(model: MultimodalModel, A_q, A_d, QI, DI, train: bool,
                   rng: np.random.Generator | None):
    cfg = model.config
    qp = QI @ model.proj_w
    dp = DI @ model.proj_w
    trunk_out = trunk_forward(model.trunk, A_q, A_d, cfg.pool)

    a_pre, cache_a = nn.dense(trunk_out.z, model.mlp_a_w, model.mlp_a_b, "relu")
    a_out, cache_a_do = nn.dropout(a_pre, cfg.dropout, rng, train)

    qn, q_norms = _l2_rows(qp)
    dn, d_norms = _l2_rows(dp)
    V = np.sum(qn * dn, axis=1)
    diff = qp - dp
    r = np.linalg.norm(diff, axis=1)
    E = 1.0 / (1.0 + r)
    b_parts = [V[:, None], E[:, None]]
    if cfg.use_q_cross:
        q_query = dp @ model.xattn_q_w + model.xattn_q_b
        q_cross, cache_xq = nn.sdp_attention(
            q_query[:, None, :], trunk_out.q_ctx, trunk_out.q_ctx)
        q_cross = q_cross[:, 0, :]
        b_parts.append(q_cross)
    else:
        cache_xq = None
    if cfg.use_d_cross:
        d_query = qp @ model.xattn_d_w + model.xattn_d_b
        d_cross, cache_xd = nn.sdp_attention(
            d_query[:, None, :], trunk_out.d_ctx, trunk_out.d_ctx)
        d_cross = d_cross[:, 0, :]
        b_parts.append(d_cross)
    else:
        cache_xd = None
    b_in = np.concatenate(b_parts, axis=1)
    b_pre, cache_b = nn.dense(b_in, model.mlp_b_w, model.mlp_b_b, "relu")
    b_out, cache_b_do = nn.dropout(b_pre, cfg.dropout, rng, train)

    fused_parts = [a_out, b_out]
    if cfg.use_hypothesis_branch:
        c_in = np.concatenate([trunk_out.q_g, qn], axis=1)
        c_pre, cache_c = nn.dense(c_in, model.mlp_c_w, model.mlp_c_b, "relu")
        c_out, cache_c_do = nn.dropout(c_pre, cfg.dropout, rng, train)
        fused_parts.append(c_out)
    else:
        cache_c = cache_c_do = None
    fused = np.concatenate(fused_parts, axis=1)
    normed, cache_bn = nn.batchnorm(fused, model.bn, train)
    dropped, cache_do = nn.dropout(normed, cfg.dropout, rng, train)
    logits, cache_out = nn.dense(dropped, model.out_w, model.out_b, "none")
    cache = (trunk_out, qp, dp, qn, dn, q_norms, d_norms, V, diff, r,
             cache_a, cache_a_do, cache_xq, cache_xd, cache_b, cache_b_do,
             cache_c, cache_c_do, cache_bn, cache_do, cache_out, QI, DI)
    return logits, cache


def _backward_batch(model: MultimodalModel, cache, d_logits: np.ndarray):
    cfg = model.config
    (trunk_out, qp, dp, qn, dn, q_norms, d_norms, V, diff, r,
     cache_a, cache_a_do, cache_xq, cache_xd, cache_b, cache_b_do,
     cache_c, cache_c_do, cache_bn, cache_do, cache_out, QI, DI) = cache
    o = cfg.gru_dim
    m = cfg.mlp_dim

    d_dropped, d_out_w, d_out_b = nn.dense_backward(cache_out, d_logits)
    d_normed = nn.dropout_backward(cache_do, d_dropped)
    d_fused, d_gamma, d_beta = nn.batchnorm_backward(cache_bn, d_normed)

    d_a_out = d_fused[:, :m]
    d_b_out = d_fused[:, m:2 * m]
    grads: dict[str, np.ndarray] = {
        "out.w": d_out_w, "out.b": d_out_b,
        "bn.gamma": d_gamma, "bn.beta": d_beta,
    }

    # branch A
    d_a_pre = nn.dropout_backward(cache_a_do, d_a_out)
    d_z, d_aw, d_ab = nn.dense_backward(cache_a, d_a_pre)
    grads["mlp_a.w"] = d_aw
    grads["mlp_a.b"] = d_ab

    # branch C
    d_q_g = None
    d_qn_total = np.zeros_like(qn)
    if cfg.use_hypothesis_branch:
        d_c_out = d_fused[:, 2 * m:]
        d_c_pre = nn.dropout_backward(cache_c_do, d_c_out)
        d_c_in, d_cw, d_cb = nn.dense_backward(cache_c, d_c_pre)
        grads["mlp_c.w"] = d_cw
        grads["mlp_c.b"] = d_cb
        d_q_g = d_c_in[:, :o]
        d_qn_total += d_c_in[:, o:]

    # branch B
    d_b_pre = nn.dropout_backward(cache_b_do, d_b_out)
    d_b_in, d_bw, d_bb = nn.dense_backward(cache_b, d_b_pre)
    grads["mlp_b.w"] = d_bw
    grads["mlp_b.b"] = d_bb
    d_V = d_b_in[:, 0]
    d_E = d_b_in[:, 1]
    col = 2
    d_q_ctx_extra = None
    d_d_ctx_extra = None
    d_qp = np.zeros_like(qp)
    d_dp = np.zeros_like(dp)
    if cfg.use_q_cross:
        d_q_cross = d_b_in[:, col:col + o]
        col += o
        dQ, dK, dVv = nn.sdp_attention_backward(cache_xq, d_q_cross[:, None, :])
        d_q_ctx_extra = dK + dVv
        d_q_query = dQ[:, 0, :]
        grads["xattn_q.w"] = dp.T @ d_q_query
        grads["xattn_q.b"] = d_q_query.sum(axis=0)
        d_dp += d_q_query @ model.xattn_q_w.T
    if cfg.use_d_cross:
        d_d_cross = d_b_in[:, col:col + o]
        dQ, dK, dVv = nn.sdp_attention_backward(cache_xd, d_d_cross[:, None, :])
        d_d_ctx_extra = dK + dVv
        d_d_query = dQ[:, 0, :]
        grads["xattn_d.w"] = qp.T @ d_d_query
        grads["xattn_d.b"] = d_d_query.sum(axis=0)
        d_qp += d_d_query @ model.xattn_d_w.T

    # V = sum(qn * dn): flows into both normalizations
    d_qn_total += d_V[:, None] * dn
    d_dn_total = d_V[:, None] * qn
    d_qp += _l2_rows_backward(qp, qn, q_norms, d_qn_total)
    d_dp += _l2_rows_backward(dp, dn, d_norms, d_dn_total)

    # E = 1/(1+r); gradient vanishes at r = 0 by convention
    with np.errstate(invalid="ignore", divide="ignore"):
        d_r = -d_E / (1.0 + r) ** 2
        d_diff = np.where(r[:, None] == 0.0, 0.0, d_r[:, None] * diff / r[:, None])
    d_qp += d_diff
    d_dp -= d_diff

    grads.update(trunk_backward(model.trunk, trunk_out.cache, d_z,
                                d_q_ctx=d_q_ctx_extra, d_d_ctx=d_d_ctx_extra,
                                d_q_g=d_q_g, d_d_g=None))
    # projection is frozen: d_qp/d_dp stop here by design
    return grads


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _encode_images(ds: Dataset, store: ImageFeatureStore) -> tuple[np.ndarray, np.ndarray]:
    QI = np.stack([store[p.claim_image_id] for p in ds])
    DI = np.stack([store[p.doc_image_id] for p in ds])
    return QI, DI


def mm_forward(pair: ClaimDocumentPair, model: MultimodalModel,
               table: EmbeddingTable, store: ImageFeatureStore) -> np.ndarray:
    """Probability 5-vector in Label5 canonical order."""
    cfg = model.config
    A_q = encode_text(pair.claim_text, table, cfg.claim_max_len)[None]
    A_d = encode_text(pair.doc_text, table, cfg.doc_max_len)[None]
    QI = np.asarray(store[pair.claim_image_id])[None]
    DI = np.asarray(store[pair.doc_image_id])[None]
    logits, _ = _forward_batch(model, A_q, A_d, QI, DI, train=False, rng=None)
    return nn.softmax(logits[0])


def mm_predict(pair: ClaimDocumentPair, model: MultimodalModel,
               table: EmbeddingTable, store: ImageFeatureStore
               ) -> tuple[Label5, np.ndarray]:
    probs = mm_forward(pair, model, table, store)
    return LABELS5[int(probs.argmax())], probs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _five_way_labels(ds: Dataset) -> np.ndarray:
    idx = []
    for pair in ds:
        if pair.label is None:
            raise DataFormatError(f"pair {pair.id!r} is unlabeled")
        idx.append(LABELS5.index(pair.label))
    return np.array(idx, dtype=np.int64)


def _eval_batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def mm_train(train: Dataset, val: Dataset, config: MultimodalConfig, seed: int,
             table: EmbeddingTable, store: ImageFeatureStore
             ) -> tuple[MultimodalModel, TrainingLog]:
    """Adam + cross-entropy; checkpoints the epoch with best val accuracy."""
    if not len(train) or not len(val):
        raise DataFormatError("empty dataset")
    from .text_entailment import _encode_dataset
    y_tr = _five_way_labels(train)
    y_va = _five_way_labels(val)
    tcfg = config.trunk_config()
    A_q_tr, A_d_tr = _encode_dataset(train, table, tcfg)
    A_q_va, A_d_va = _encode_dataset(val, table, tcfg)
    QI_tr, DI_tr = _encode_images(train, store)
    QI_va, DI_va = _encode_images(val, store)

    model = MultimodalModel.init(config, seed)
    proj_before = model.proj_w.copy()
    batch_rng = np.random.default_rng(seed + 1)
    drop_rng = np.random.default_rng(seed + 2)
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    scheduler = ReduceLROnPlateau(state)
    entries: list[EpochStats] = []
    best_acc = -1.0
    best_epoch = -1
    best_arrays: dict[str, np.ndarray] = {}
    stale = 0
    for epoch in range(config.max_epochs):
        batch_losses = []
        for idx in minibatches(len(train), config.batch_size, batch_rng):
            logits, cache = _forward_batch(
                model, A_q_tr[idx], A_d_tr[idx], QI_tr[idx], DI_tr[idx],
                train=True, rng=drop_rng)
            loss, _, d_logits = nn.softmax_cross_entropy(logits, y_tr[idx])
            grads = _backward_batch(model, cache, d_logits)
            adam_step(model.params(), grads, state)
            batch_losses.append(loss * len(idx))
        train_loss = float(np.sum(batch_losses) / len(train))

        losses = []
        preds = np.empty(len(y_va), dtype=np.int64)
        for sl in _eval_batches(len(y_va), config.batch_size):
            logits, _ = _forward_batch(model, A_q_va[sl], A_d_va[sl],
                                       QI_va[sl], DI_va[sl], train=False, rng=None)
            loss, probs, _ = nn.softmax_cross_entropy(logits, y_va[sl])
            losses.append(loss * (sl.stop - sl.start))
            preds[sl] = probs.argmax(axis=1)
        val_loss = float(np.sum(losses) / len(y_va))
        golds = [LABELS5[i] for i in y_va]
        guesses = [LABELS5[i] for i in preds]
        val_acc = accuracy(golds, guesses)
        val_f1 = weighted_f1(golds, guesses, LABELS5)
        entries.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_loss=val_loss, val_acc=val_acc,
                                  val_weighted_f1=val_f1))
        scheduler.update(val_loss)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in model.all_arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_arrays(best_arrays)
    assert np.array_equal(model.proj_w, proj_before), "frozen projection moved"
    return model, TrainingLog(entries=entries, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

CHECKPOINT_KIND = "multimodal5"


def save_model(path: str, model: MultimodalModel) -> None:
    from .checkpoint import save_params
    from .config import config_to_kv
    save_params(path, CHECKPOINT_KIND, model.all_arrays(),
                meta={"config": config_to_kv(model.config)})


def load_model(path: str) -> MultimodalModel:
    from .checkpoint import load_params
    from .config import config_from_kv
    _, meta, params = load_params(path, expect_kind=CHECKPOINT_KIND)
    config = config_from_kv(MultimodalConfig, meta["config"])
    model = MultimodalModel.init(config, seed=0)
    model.set_arrays(params)
    return model
