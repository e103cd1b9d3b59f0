"""End-to-end synthetic run: generate, train both models, fit the tree.

Drives the installed CLI so the whole public surface gets exercised; the
final table compares the text matcher, the fusion net, and the ensemble
with and without source-domain features.
"""

import argparse
import json
import os
import sys

from mmentail import cli
from mmentail.corpus import load_feature_store, save_feature_store


def sh(*args: str) -> None:
    code = cli.run(list(args))
    if code != 0:
        sys.exit(code)


def wf1(run_dir: str) -> float:
    with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as fh:
        return json.load(fh)["weighted_f1"]


def write_cfg(path: str, **kv) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/pipeline")
    ap.add_argument("--n-train", type=int, default=500, help="pairs per class")
    ap.add_argument("--n-val", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7, help="training seed")
    args = ap.parse_args()

    w = args.workdir
    os.makedirs(w, exist_ok=True)
    write_cfg(f"{w}/gen_train.cfg", n_per_class=args.n_train, seed=11,
              id_prefix="tr", split_name="train")
    write_cfg(f"{w}/gen_val.cfg", n_per_class=args.n_val, seed=12,
              id_prefix="va", split_name="val")
    # narrow maps + small pools keep both trainings under a minute
    write_cfg(f"{w}/text_model.cfg", embed_dim=32, gru_dim=48, claim_max_len=8,
              doc_max_len=16, pool="1,2", batch_size=16, lr=0.002,
              max_epochs=40, patience=10)
    write_cfg(f"{w}/fusion_model.cfg", image_dim=64, image_proj_dim=64,
              embed_dim=32, gru_dim=48, claim_max_len=8, doc_max_len=16,
              pool="1,2", mlp_dim=64, batch_size=32, lr=0.002,
              max_epochs=60, patience=12)

    sh("generate", "--preset", "separable_5way", "--config", f"{w}/gen_train.cfg",
       "--embed-dim", "32", "--embed-seed", "5", "--out", f"{w}/data_train")
    sh("generate", "--preset", "separable_5way", "--config", f"{w}/gen_val.cfg",
       "--split", "val", "--out", f"{w}/data_val")
    sh("analyze", "--data", f"{w}/data_train/train.jsonl",
       "--features", f"{w}/data_train/train.features", "--out", f"{w}/stats")

    store = load_feature_store(f"{w}/data_train/train.features")
    val_store = load_feature_store(f"{w}/data_val/val.features")
    for image_id in val_store.ids():
        store.add(image_id, val_store[image_id])
    save_feature_store(store, f"{w}/all.features")

    emb = f"{w}/data_train/embeddings.txt"
    common = ["--train", f"{w}/data_train/train.jsonl",
              "--val", f"{w}/data_val/val.jsonl"]
    sh("train-text", *common, "--embeddings", emb,
       "--config", f"{w}/text_model.cfg", "--seed", str(args.seed),
       "--out", f"{w}/text_model")
    sh("train-multimodal", *common, "--features", f"{w}/data_train/train.features",
       "--val-features", f"{w}/data_val/val.features", "--embeddings", emb,
       "--config", f"{w}/fusion_model.cfg", "--seed", str(args.seed),
       "--out", f"{w}/fusion_model")

    ens = ["train-ensemble", *common, "--features", f"{w}/all.features",
           "--text-checkpoint", f"{w}/text_model/model.ckpt",
           "--embeddings", emb]
    sh(*ens, "--dump-features", "--out", f"{w}/ensemble")
    sh(*ens, "--no-domains", "--out", f"{w}/ensemble_no_domains")

    sh("predict", "--kind", "ensemble5", "--checkpoint", f"{w}/ensemble/tree.json",
       "--data", f"{w}/data_val/val.jsonl", "--features", f"{w}/all.features",
       "--text-checkpoint", f"{w}/text_model/model.ckpt", "--embeddings", emb,
       "--out", f"{w}/ensemble_preds")
    sh("evaluate", "--preds", f"{w}/ensemble_preds/predictions.jsonl",
       "--gold", f"{w}/data_val/val.jsonl", "--out", f"{w}/ensemble_eval")

    print()
    print(f"{'model':<28}val weighted F1")
    print(f"{'text matcher (3-way)':<28}{wf1(f'{w}/text_model'):.4f}")
    print(f"{'fusion net (5-way)':<28}{wf1(f'{w}/fusion_model'):.4f}")
    print(f"{'ensemble':<28}{wf1(f'{w}/ensemble'):.4f}")
    print(f"{'ensemble, no domains':<28}{wf1(f'{w}/ensemble_no_domains'):.4f}")


if __name__ == "__main__":
    main()
