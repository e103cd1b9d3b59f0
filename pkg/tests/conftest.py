import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmentail.corpus import ClaimDocumentPair, Dataset, ImageFeatureStore, Label5
from mmentail.synthgen import generate_dataset, separable_5way_preset
from mmentail.text_prep import partitioned_embedding_table, tokenize

settings.register_profile(
    "local", deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("local")


def make_pair(pair_id="p0", claim_text="alpha beta gamma", claim_ocr="",
              claim_image_id="qi0",
              claim_image_url="https://newswire.example/a/1.jpg",
              doc_text="alpha beta gamma delta", doc_ocr="",
              doc_image_id="di0",
              doc_image_url="https://photostock.example/b/2.jpg",
              label=Label5.SUPPORT_MULTIMODAL) -> ClaimDocumentPair:
    return ClaimDocumentPair(
        id=pair_id, claim_text=claim_text, claim_ocr=claim_ocr,
        claim_image_id=claim_image_id, claim_image_url=claim_image_url,
        doc_text=doc_text, doc_ocr=doc_ocr, doc_image_id=doc_image_id,
        doc_image_url=doc_image_url, label=label)


def tiny_store(ids=("qi0", "di0"), dim=4, seed=0) -> ImageFeatureStore:
    rng = np.random.default_rng(seed)
    store = ImageFeatureStore(dim)
    for image_id in ids:
        store.add(image_id, rng.standard_normal(dim))
    return store


def observed_token_table(*datasets, dim=32, seed=5):
    """Claim tokens in one orthogonal slice, remaining doc tokens in the other."""
    claim = sorted({t for ds in datasets for p in ds
                    for t in tokenize(p.claim_text)})
    doc = sorted({t for ds in datasets for p in ds
                  for t in tokenize(p.doc_text)} - set(claim))
    return partitioned_embedding_table([claim, doc], dim, seed)


@pytest.fixture(scope="session")
def small_5way():
    """Small planted-signal corpus: (train, val, merged store)."""
    base = separable_5way_preset()
    train, store = generate_dataset(
        dataclasses.replace(base, n_per_class=12, seed=11, id_prefix="tr"))
    val, val_store = generate_dataset(
        dataclasses.replace(base, n_per_class=6, seed=12, id_prefix="va"))
    for image_id in val_store.ids():
        store.add(image_id, val_store[image_id])
    return train, val, store


@pytest.fixture(scope="session")
def small_table(small_5way):
    train, val, _ = small_5way
    return observed_token_table(train, val)


@pytest.fixture()
def hand_dataset() -> Dataset:
    pairs = [
        make_pair("a", label=Label5.SUPPORT_MULTIMODAL),
        make_pair("b", claim_text="delta epsilon", doc_text="zeta eta theta",
                  label=Label5.REFUTE),
        make_pair("c", claim_text="iota kappa", doc_text="iota kappa mu",
                  label=Label5.INSUFFICIENT_TEXT),
    ]
    return Dataset(pairs=pairs, split_name="hand")
