"""Hypothesis-only bias probes on planted-signal and signal-free corpora.

A claim-side-only classifier should sit at chance when the generator plants
no claim signal, and well above chance when claim length encodes the label.
Adding image features to the probe must not help on signal-free data either.
"""

import argparse
import dataclasses

from mmentail.analysis import ProbeConfig, probe_train_eval
from mmentail.synthgen import biased_claim_preset, generate_dataset, signal_free_preset
from mmentail.text_prep import random_embedding_table, tokenize


def corpus(preset, n_train: int, n_val: int, seed_train: int, seed_val: int,
           prefix: str):
    train_cfg = dataclasses.replace(preset, n_per_class=n_train,
                                    seed=seed_train, id_prefix=prefix + "t")
    val_cfg = dataclasses.replace(preset, n_per_class=n_val,
                                  seed=seed_val, id_prefix=prefix + "v")
    train, train_store = generate_dataset(train_cfg)
    val, val_store = generate_dataset(val_cfg)
    for image_id in val_store.ids():
        train_store.add(image_id, val_store[image_id])
    return train, val, train_store


def claim_table(*datasets, dim: int, seed: int):
    tokens = sorted({tok for ds in datasets for pair in ds
                     for tok in tokenize(pair.claim_text)})
    return random_embedding_table(tokens, dim, seed)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=500, help="pairs per class")
    ap.add_argument("--n-val", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7, help="probe training seed")
    args = ap.parse_args()

    config = ProbeConfig(gru_dim=64, image_proj_dim=64, hidden_dim=64,
                        claim_max_len=30, epochs=15)
    chance = 1.0 / config.n_classes

    print("signal-free corpus (expect roughly chance on both probes)")
    train, val, store = corpus(signal_free_preset(), args.n_train, args.n_val,
                               21, 22, "f")
    table = claim_table(train, val, dim=32, seed=5)
    for mode in ("text_only", "text_plus_image"):
        f1, acc = probe_train_eval(train, val, mode, args.seed, table,
                                   store=store, config=config)
        print(f"  {mode:<18} accuracy {acc:.3f}  (chance {chance:.3f})")

    print("claim-length-biased corpus (expect well above chance)")
    train, val, store = corpus(biased_claim_preset(), args.n_train, args.n_val,
                               31, 32, "b")
    table = claim_table(train, val, dim=32, seed=5)
    f1, acc = probe_train_eval(train, val, "text_only", args.seed, table,
                               store=store, config=config)
    print(f"  {'text_only':<18} accuracy {acc:.3f}  (chance {chance:.3f})")


if __name__ == "__main__":
    main()
