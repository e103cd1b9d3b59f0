"""Release gate: the project's promised behaviors at their stated tolerances.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail line
per promise: gradient integrity, closed-form oracles, tree equivalence to
exhaustive search, end-to-end learnability on planted corpora, the bias
probe's null and alternative, generator statistics round-trip, and byte
determinism.  A final pair of checks runs against a real corpus when
MMENTAIL_FACTIFY_DIR points at one; they are skipped otherwise.
"""

import dataclasses
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from conftest import observed_token_table
from tree_oracle import assert_same_tree, grow_reference

from mmentail import nn
from mmentail.analysis import (ProbeConfig, domain_label_distribution,
                               image_cosine_quantity, overlap_quantity,
                               per_class_prf, per_class_stats, probe_train_eval,
                               weighted_f1)
from mmentail.cli import run
from mmentail.config import config_to_kv, write_kv_file
from mmentail.corpus import LABELS5, Label5, load_dataset, load_feature_store
from mmentail.ensemble import (cosine_similarity, extract_features,
                               fit_domain_encoder, gini, tree_predict,
                               tree_train, tree_train_xy)
from mmentail.multimodal import (MultimodalConfig, MultimodalModel, mm_train,
                                 visual_match, _backward_batch, _forward_batch)
from mmentail.optim import grad_check
from mmentail.synthgen import (biased_claim_preset, generate_3way_dataset,
                               generate_dataset, separable_3way_preset,
                               separable_5way_preset, signal_free_preset,
                               table_preset)
from mmentail.text_entailment import (MatchPyramidConfig, MatchPyramidModel,
                                      MatchPyramidPredictor, mp_train,
                                      _mp_backward, _mp_logits)
from mmentail.text_prep import (load_embedding_table, random_embedding_table,
                                tokenize)

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-9

TEXT_CFG = MatchPyramidConfig(
    embed_dim=32, gru_dim=48, claim_max_len=8, doc_max_len=16,
    pool=(1, 2), batch_size=16, lr=2e-3, max_epochs=40, patience=10)

FUSION_CFG = MultimodalConfig(
    image_dim=64, image_proj_dim=64, embed_dim=32, gru_dim=48,
    claim_max_len=8, doc_max_len=16, pool=(1, 2), mlp_dim=64,
    batch_size=32, lr=2e-3, max_epochs=60, patience=12)

PROBE_CFG = ProbeConfig(gru_dim=64, image_proj_dim=64, hidden_dim=64,
                        claim_max_len=30, epochs=15)


def merged(primary, extra):
    for image_id in extra.ids():
        primary.add(image_id, extra[image_id])
    return primary


@pytest.fixture(scope="module")
def three_way_bundle():
    """600/150-pair corpus balanced over the collapsed classes."""
    base = separable_3way_preset()
    train, _ = generate_3way_dataset(
        dataclasses.replace(base, n_per_class=200, seed=11, id_prefix="tr"))
    val, _ = generate_3way_dataset(
        dataclasses.replace(base, n_per_class=50, seed=12, id_prefix="va"))
    return train, val, observed_token_table(train, val)


@pytest.fixture(scope="module")
def five_way_bundle():
    """2500/500-pair planted 5-way corpus with its merged image store."""
    base = separable_5way_preset()
    train, store = generate_dataset(
        dataclasses.replace(base, n_per_class=500, seed=11, id_prefix="tr"))
    val, val_store = generate_dataset(
        dataclasses.replace(base, n_per_class=100, seed=12, id_prefix="va"))
    return train, val, merged(store, val_store), observed_token_table(train, val)


# ---------------------------------------------------------------------------
# Gradient integrity
# ---------------------------------------------------------------------------

def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    sq = lambda out, t: float(((out - t) ** 2).sum())

    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    t = rng.standard_normal((4, 3))
    out, cache = nn.dense(x, w, b, "relu")
    dx, dw, db = nn.dense_backward(cache, 2 * (out - t))
    assert grad_check(lambda: sq(nn.dense(x, w, b, "relu")[0], t),
                      {"x": x, "w": w, "b": b},
                      {"x": dx, "w": dw, "b": db}) < GRAD_TOL

    X = rng.standard_normal((2, 6, 3))
    gp = nn.GruParams.init(rng, 3, 4)
    t_ctx, t_fin = rng.standard_normal((2, 6, 4)), rng.standard_normal((2, 4))

    def gru_loss():
        (ctx, fin), _ = nn.gru_forward(X, gp)
        return sq(ctx, t_ctx) + sq(fin, t_fin)

    (ctx, fin), cache = nn.gru_forward(X, gp)
    _, grads = nn.gru_backward(cache, 2 * (ctx - t_ctx), 2 * (fin - t_fin))
    assert grad_check(gru_loss, {k: getattr(gp, k) for k in grads}, grads) < GRAD_TOL

    Q = rng.standard_normal((3, 4))
    K = rng.standard_normal((5, 4))
    V = rng.standard_normal((5, 6))
    t_a = rng.standard_normal((3, 6))
    out, cache = nn.sdp_attention(Q, K, V)
    dQ, dK, dV = nn.sdp_attention_backward(cache, 2 * (out - t_a))
    assert grad_check(lambda: sq(nn.sdp_attention(Q, K, V)[0], t_a),
                      {"Q": Q, "K": K, "V": V},
                      {"Q": dQ, "K": dK, "V": dV}) < GRAD_TOL

    cfg = MatchPyramidConfig(embed_dim=5, gru_dim=6, claim_max_len=6,
                             doc_max_len=8, conv_channels=(3, 4), pool=(1, 1),
                             mlp_hidden=(10, 8))
    model = MatchPyramidModel.init(cfg, seed=3)
    A_q = rng.standard_normal((3, cfg.claim_max_len, cfg.embed_dim))
    A_d = rng.standard_normal((3, cfg.doc_max_len, cfg.embed_dim))
    labels = np.array([0, 1, 2])

    def mp_loss():
        logits, _ = _mp_logits(model, A_q, A_d)
        value, _, _ = nn.softmax_cross_entropy(logits, labels)
        return float(value)

    logits, cache = _mp_logits(model, A_q, A_d)
    _, _, d_logits = nn.softmax_cross_entropy(logits, labels)
    assert grad_check(mp_loss, model.params(),
                      _mp_backward(model, cache, d_logits),
                      n_coords=200) < GRAD_TOL

    fcfg = MultimodalConfig(image_dim=7, image_proj_dim=5, embed_dim=5,
                            gru_dim=6, claim_max_len=6, doc_max_len=8,
                            conv_channels=(3, 4), pool=(1, 1), mlp_dim=9,
                            dropout=0.0)
    fmodel = MultimodalModel.init(fcfg, seed=4)
    A_q = rng.standard_normal((4, fcfg.claim_max_len, fcfg.embed_dim))
    A_d = rng.standard_normal((4, fcfg.doc_max_len, fcfg.embed_dim))
    QI = rng.standard_normal((4, fcfg.image_dim))
    DI = rng.standard_normal((4, fcfg.image_dim))
    labels = np.array([0, 4, 2, 1])

    def fusion_loss():
        saved = (fmodel.bn.running_mean.copy(), fmodel.bn.running_var.copy())
        logits, _ = _forward_batch(fmodel, A_q, A_d, QI, DI, True, None)
        fmodel.bn.running_mean, fmodel.bn.running_var = saved
        value, _, _ = nn.softmax_cross_entropy(logits, labels)
        return float(value)

    saved = (fmodel.bn.running_mean.copy(), fmodel.bn.running_var.copy())
    logits, cache = _forward_batch(fmodel, A_q, A_d, QI, DI, True, None)
    fmodel.bn.running_mean, fmodel.bn.running_var = saved
    _, _, d_logits = nn.softmax_cross_entropy(logits, labels)
    assert grad_check(fusion_loss, fmodel.params(),
                      _backward_batch(fmodel, cache, d_logits),
                      n_coords=200) < GRAD_TOL


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------

def test_closed_form_oracles_on_randomized_instances():
    rng = np.random.default_rng(23)

    for _ in range(20):
        m, n, dk, dv = rng.integers(1, 6, size=4)
        Q = rng.standard_normal((m, dk))
        K = rng.standard_normal((n, dk))
        V = rng.standard_normal((n, dv))
        want = np.zeros((m, dv))
        for i in range(m):
            scores = np.array([Q[i] @ K[j] for j in range(n)]) / np.sqrt(dk)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            for j in range(n):
                want[i] += weights[j] * V[j]
        got, _ = nn.sdp_attention(Q, K, V)
        np.testing.assert_allclose(got, want, atol=ORACLE_TOL)

    for _ in range(20):
        dim = int(rng.integers(1, 8))
        q, d = rng.standard_normal(dim), rng.standard_normal(dim)
        V, E = visual_match(q, d)
        qn, dn = q / np.linalg.norm(q), d / np.linalg.norm(d)
        assert abs(V - float(qn @ dn)) < ORACLE_TOL
        assert abs(E - 1.0 / (1.0 + np.linalg.norm(q - d))) < ORACLE_TOL
        assert abs(cosine_similarity(q, d)
                   - q @ d / (np.linalg.norm(q) * np.linalg.norm(d))) < ORACLE_TOL

    q = rng.standard_normal(5)
    V, E = visual_match(q, q.copy())
    assert abs(V - 1.0) < ORACLE_TOL and abs(E - 1.0) < ORACLE_TOL
    d = q.copy()
    d[0] -= 1.0                       # unit distance
    assert abs(visual_match(q, d)[1] - 0.5) < ORACLE_TOL

    for _ in range(20):
        counts = rng.integers(0, 9, size=int(rng.integers(1, 6)))
        if counts.sum() == 0:
            counts[0] = 1
        total = Fraction(int(counts.sum()))
        want = 1 - sum(Fraction(int(c)) ** 2 / total ** 2 for c in counts)
        assert abs(gini([int(c) for c in counts]) - float(want)) < ORACLE_TOL

    for _ in range(20):
        n_labels = int(rng.integers(2, 5))
        size = int(rng.integers(2, 30))
        golds = list(rng.integers(0, n_labels, size=size))
        preds = list(rng.integers(0, n_labels, size=size))
        want = 0.0
        for label in range(n_labels):
            tp = sum(g == label and p == label for g, p in zip(golds, preds))
            fp = sum(g != label and p == label for g, p in zip(golds, preds))
            fn = sum(g == label and p != label for g, p in zip(golds, preds))
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            want += f1 * golds.count(label) / size
        got = weighted_f1(golds, preds, labels=range(n_labels))
        assert abs(got - want) < ORACLE_TOL


# ---------------------------------------------------------------------------
# Tree oracle
# ---------------------------------------------------------------------------

def test_tree_training_matches_exhaustive_search():
    rng = np.random.default_rng(91)
    for trial in range(50):
        n = int(rng.integers(1, 31))
        n_feat = int(rng.integers(1, 4))
        X = rng.integers(0, 5, size=(n, n_feat)).astype(np.float64)
        y = rng.integers(0, 5, size=n)
        depth = int(rng.integers(0, 9))
        tree = tree_train_xy(X, y, max_depth=depth)
        assert_same_tree(tree.root, grow_reference(X, y.astype(np.int64), depth),
                         path=f"trial{trial}")


# ---------------------------------------------------------------------------
# End-to-end learnability on planted corpora
# ---------------------------------------------------------------------------

def test_text_matcher_f1_on_planted_corpus(three_way_bundle):
    train, val, table = three_way_bundle
    t0 = time.time()
    _, log = mp_train(train, val, TEXT_CFG, seed=7, table=table)
    elapsed = time.time() - t0
    best = max(entry.val_weighted_f1 for entry in log.entries)
    assert best >= 0.90, f"best val weighted F1 {best:.4f}"
    assert elapsed < 600, f"took {elapsed:.0f}s"


def test_fusion_model_f1_on_planted_corpus(five_way_bundle):
    train, val, store, table = five_way_bundle
    t0 = time.time()
    _, log = mm_train(train, val, FUSION_CFG, seed=7, table=table, store=store)
    elapsed = time.time() - t0
    best = max(entry.val_weighted_f1 for entry in log.entries)
    assert best >= 0.80, f"best val weighted F1 {best:.4f}"
    assert elapsed < 1800, f"took {elapsed:.0f}s"


def test_domain_features_strictly_improve_ensemble(five_way_bundle):
    train, val, store, table = five_way_bundle
    model, _ = mp_train(train, val, TEXT_CFG, seed=7, table=table)
    predictor = MatchPyramidPredictor(model, table)
    encoder = fit_domain_encoder(train)
    train_records = [(extract_features(p, predictor, store, encoder), p.label)
                     for p in train]
    val_records = [extract_features(p, predictor, store, encoder) for p in val]
    golds = [p.label for p in val]

    scores = {}
    for include in (True, False):
        tree = tree_train(train_records, max_depth=8, include_domains=include)
        preds = [tree_predict(tree, rec)[0] for rec in val_records]
        scores[include] = weighted_f1(golds, preds)
    assert scores[True] >= 0.85, f"with domains {scores[True]:.4f}"
    assert scores[True] > scores[False], \
        f"with domains {scores[True]:.4f} vs without {scores[False]:.4f}"


# ---------------------------------------------------------------------------
# Bias probe: null on signal-free data, alternative on planted claim bias
# ---------------------------------------------------------------------------

def test_claim_only_probe_null_and_alternative():
    base = signal_free_preset()
    train, store = generate_dataset(
        dataclasses.replace(base, n_per_class=500, seed=21, id_prefix="ftr"))
    val, val_store = generate_dataset(
        dataclasses.replace(base, n_per_class=100, seed=22, id_prefix="fva"))
    store = merged(store, val_store)
    tokens = sorted({t for ds in (train, val) for p in ds
                     for t in tokenize(p.claim_text)})
    table = random_embedding_table(tokens, dim=32, seed=5)
    chance = 1.0 / len(LABELS5)
    for mode in ("text_only", "text_plus_image"):
        _, acc = probe_train_eval(train, val, mode, seed=7, table=table,
                                  store=store, config=PROBE_CFG)
        assert acc <= chance + 0.10, f"signal-free {mode} accuracy {acc:.3f}"

    base = biased_claim_preset()
    train, _ = generate_dataset(
        dataclasses.replace(base, n_per_class=500, seed=31, id_prefix="btr"))
    val, _ = generate_dataset(
        dataclasses.replace(base, n_per_class=100, seed=32, id_prefix="bva"))
    tokens = sorted({t for ds in (train, val) for p in ds
                     for t in tokenize(p.claim_text)})
    table = random_embedding_table(tokens, dim=32, seed=5)
    _, acc = probe_train_eval(train, val, "text_only", seed=7, table=table,
                              config=PROBE_CFG)
    assert acc >= 0.50, f"planted-bias accuracy {acc:.3f}"


# ---------------------------------------------------------------------------
# Generator statistics round-trip through the analysis module
# ---------------------------------------------------------------------------

def test_analysis_recovers_generator_targets():
    config = table_preset()       # 500 per class at the published statistics
    ds, store = generate_dataset(config)

    overlap = per_class_stats(ds, overlap_quantity)
    cosine = per_class_stats(ds, image_cosine_quantity(store))
    for i, label in enumerate(LABELS5):
        assert overlap[label].mean == pytest.approx(
            config.overlap_mean[i], abs=0.05), f"overlap {label.value}"
        assert cosine[label].mean == pytest.approx(
            config.image_cos_target[i], abs=0.05), f"cosine {label.value}"

    doc_domains = domain_label_distribution(ds)["doc"]
    skew_row = doc_domains.get(config.skew_domain, {})
    n = config.n_per_class
    refute_rate = skew_row.get(Label5.REFUTE, 0) / n
    other_rate = sum(skew_row.get(label, 0) for label in LABELS5
                     if label is not Label5.REFUTE) / (4 * n)
    assert refute_rate == pytest.approx(config.skew_refute_prob, abs=0.05)
    assert other_rate == pytest.approx(config.skew_other_prob, abs=0.05)


# ---------------------------------------------------------------------------
# Byte determinism of the command-line workflows
# ---------------------------------------------------------------------------

def test_generate_and_train_runs_are_byte_identical(tmp_path):
    def rerun(args, names):
        dirs = [tmp_path / f"{names[0]}_{i}" for i in (0, 1)]
        for d in dirs:
            assert run(args + ["--out", str(d)]) == 0
        for name in names[1]:
            a = (dirs[0] / name).read_bytes()
            b = (dirs[1] / name).read_bytes()
            assert a == b, f"{names[0]}: {name} differs between reruns"
        return dirs[0]

    gen = rerun(["generate", "--preset", "separable_3way", "--seed", "41",
                 "--n-per-class", "6", "--split", "train", "--embed-dim", "16"],
                ("gen", ["train.jsonl", "train.features", "embeddings.txt"]))
    val = rerun(["generate", "--preset", "separable_3way", "--seed", "42",
                 "--n-per-class", "3", "--split", "val"],
                ("genval", ["val.jsonl", "val.features"]))

    text_kv = tmp_path / "text.kv"
    write_kv_file(text_kv, config_to_kv(MatchPyramidConfig(
        embed_dim=16, gru_dim=8, claim_max_len=8, doc_max_len=16,
        conv_channels=(4, 8), pool=(1, 2), mlp_hidden=(16, 8),
        batch_size=16, lr=5e-3, max_epochs=2, patience=5)))
    text = rerun(["train-text", "--train", str(gen / "train.jsonl"),
                  "--val", str(val / "val.jsonl"),
                  "--embeddings", str(gen / "embeddings.txt"),
                  "--config", str(text_kv), "--seed", "7"],
                 ("text", ["model.ckpt", "metrics.json", "training_log.csv"]))

    gen5 = rerun(["generate", "--preset", "separable_5way", "--seed", "43",
                  "--n-per-class", "4", "--split", "train",
                  "--embed-dim", "16"],
                 ("gen5", ["train.jsonl", "train.features"]))
    mm_kv = tmp_path / "mm.kv"
    write_kv_file(mm_kv, config_to_kv(MultimodalConfig(
        image_dim=64, image_proj_dim=8, embed_dim=16, gru_dim=8,
        claim_max_len=8, doc_max_len=12, conv_channels=(4, 8), pool=(1, 2),
        mlp_dim=16, dropout=0.1, batch_size=16, lr=5e-3, max_epochs=1,
        patience=3)))
    rerun(["train-multimodal", "--train", str(gen5 / "train.jsonl"),
           "--val", str(gen5 / "train.jsonl"),
           "--features", str(gen5 / "train.features"),
           "--embeddings", str(gen5 / "embeddings.txt"),
           "--config", str(mm_kv), "--seed", "7"],
          ("mm", ["model.ckpt", "metrics.json", "training_log.csv"]))

    rerun(["train-ensemble", "--train", str(gen / "train.jsonl"),
           "--val", str(gen / "train.jsonl"),
           "--features", str(gen / "train.features"),
           "--text-checkpoint", str(text / "model.ckpt"),
           "--embeddings", str(gen / "embeddings.txt")],
          ("ens", ["tree.json", "metrics.json"]))


# ---------------------------------------------------------------------------
# Real-corpus checks (enabled by MMENTAIL_FACTIFY_DIR)
# ---------------------------------------------------------------------------

REAL_DIR = os.environ.get("MMENTAIL_FACTIFY_DIR", "")

needs_real_corpus = pytest.mark.skipif(
    not REAL_DIR, reason="MMENTAIL_FACTIFY_DIR not set")


def _load_real_corpus():
    root = Path(REAL_DIR)
    features = root / "images.features"
    train = load_dataset(root / "train.jsonl", feature_store_path=features,
                         split_name="train")
    val = load_dataset(root / "val.jsonl", feature_store_path=features,
                       split_name="val")
    store = load_feature_store(features)
    table = load_embedding_table(root / "embeddings.txt")
    return train, val, store, table


@needs_real_corpus
def test_real_corpus_text_matcher_margin():
    train, val, _, table = _load_real_corpus()
    config = dataclasses.replace(MatchPyramidConfig(), embed_dim=table.dim)
    _, log = mp_train(train, val, config, seed=7, table=table)
    best = max(entry.val_weighted_f1 for entry in log.entries)
    assert abs(best - 0.81) <= 0.04, f"val weighted F1 {best:.4f}"


@needs_real_corpus
def test_real_corpus_ensemble_refute_f1():
    train, val, store, table = _load_real_corpus()
    config = dataclasses.replace(MatchPyramidConfig(), embed_dim=table.dim)
    model, _ = mp_train(train, val, config, seed=7, table=table)
    predictor = MatchPyramidPredictor(model, table)
    encoder = fit_domain_encoder(train)
    records = [(extract_features(p, predictor, store, encoder), p.label)
               for p in train]
    tree = tree_train(records, max_depth=8, include_domains=True)
    golds = [p.label for p in val]
    preds = [tree_predict(tree, extract_features(p, predictor, store, encoder))[0]
             for p in val]
    # overall score is informational: print it, gate only the refute class
    print(f"ensemble val weighted F1 {weighted_f1(golds, preds):.4f} "
          "(in-repo text predictor)")
    refute = per_class_prf(golds, preds)[Label5.REFUTE]
    assert refute["f1"] >= 0.95, f"refute F1 {refute['f1']:.4f}"
