"""Synthetic corpus generator with plantable, recoverable signals.

Each pair gets: claim tokens from one token pool, document filler from a
disjoint pool plus an exact count of copied claim tokens (word overlap),
anchored random image features whose pairwise cosine concentrates on a
per-class target, an optional refutation marker phrase, and image-URL
domains with a configurable label skew.

The image construction: every feature is normalize(a*u0 + z) with a fixed
anchor direction u0, giving any two independent vectors an expected cosine
of `image_cos_base`. Correlated documents mix the claim's unit vector with
an independent one at a ratio solved in closed form from the target mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .corpus import ClaimDocumentPair, Dataset, ImageFeatureStore, Label5, LABELS5
from .text_prep import tokenize

REFUTE_IDX = LABELS5.index(Label5.REFUTE)
SUPPORT_MULTI_IDX = LABELS5.index(Label5.SUPPORT_MULTIMODAL)


@dataclass(frozen=True)
class GenConfig:
    """Defaults plant the published per-class statistics at desk scale."""
    n_per_class: int = 500
    seed: int = 0
    id_prefix: str = "p"
    split_name: str = ""
    feature_dim: int = 64
    claim_vocab_size: int = 200
    doc_vocab_size: int = 200
    # per-class values follow Label5 declaration order
    claim_len_min: tuple[int, int, int, int, int] = (8, 8, 8, 8, 8)
    claim_len_max: tuple[int, int, int, int, int] = (16, 16, 16, 16, 16)
    doc_len_min: int = 30
    doc_len_max: int = 90
    ocr_len_min: int = 0
    ocr_len_max: int = 12
    overlap_mean: tuple[float, float, float, float, float] = (
        0.299, 0.316, 0.221, 0.238, 0.406)
    overlap_std: float = 0.15
    image_cos_base: float = 0.7035
    image_cos_target: tuple[float, float, float, float, float] = (
        0.864, 0.704, 0.835, 0.703, 0.82)
    refute_marker: str = "the claim is false"
    refute_marker_prob: float = 1.0
    domain_pool: tuple[str, ...] = (
        "newswire.example", "photostock.example", "dailyfeed.example",
        "snaparchive.example", "wireimages.example", "mediadesk.example")
    skew_domain: str = "refutehub.example"
    skew_refute_prob: float = 0.45
    skew_other_prob: float = 0.0125
    # skew-domain refutes lose their marker and mimic support-band overlap,
    # so only the domain feature can resolve them
    ambiguous_refute: bool = False
    # copied claim tokens appear as one in-order run (a quote) rather than
    # scattered singles
    contiguous_overlap: bool = True
    # the quoted run is repeated this many times; the distinct-token overlap
    # ratio is unchanged, only match density grows
    overlap_copies: int = 1

    def __post_init__(self):
        if self.n_per_class < 1 or self.feature_dim < 1:
            raise ValueError("n_per_class and feature_dim must be positive")
        if not 0.0 < self.image_cos_base < 1.0:
            raise ValueError("image_cos_base must be in (0, 1)")
        for t in self.image_cos_target:
            if not self.image_cos_base - 0.005 <= t < 1.0:
                raise ValueError(f"image_cos_target {t} below base or >= 1")
        for lo, hi in zip(self.claim_len_min, self.claim_len_max):
            if not 1 <= lo <= hi:
                raise ValueError("bad claim length range")
        if not 0 <= self.doc_len_min <= self.doc_len_max:
            raise ValueError("bad doc length range")
        if not 0 <= self.ocr_len_min <= self.ocr_len_max:
            raise ValueError("bad ocr length range")
        if max(self.claim_len_max) > self.claim_vocab_size:
            raise ValueError("claim pool smaller than max claim length")
        if self.skew_domain in self.domain_pool:
            raise ValueError("skew_domain must not be in domain_pool")
        for p in (self.skew_refute_prob, self.skew_other_prob,
                  self.refute_marker_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if self.overlap_copies < 1:
            raise ValueError("overlap_copies must be positive")


def table_preset() -> GenConfig:
    """Per-class statistics at the published train-split values."""
    return GenConfig()


def separable_5way_preset() -> GenConfig:
    """Wide overlap gaps plus image-cosine and domain channels for all 5 classes.

    Text side mirrors the 3-way separable recipe; the image cosine splits the
    multimodal from the text-only variants, and skew-domain refutes without a
    marker keep a slice of the corpus that only the domain feature resolves.
    """
    return replace(GenConfig(),
                   claim_vocab_size=2000, doc_vocab_size=4000,
                   claim_len_min=(5,) * 5, claim_len_max=(7,) * 5,
                   doc_len_min=10, doc_len_max=12,
                   overlap_mean=(1.0, 1.0, 0.0, 0.0, 0.5),
                   overlap_std=0.0,
                   image_cos_base=0.30,
                   image_cos_target=(0.90, 0.30, 0.85, 0.30, 0.90),
                   ambiguous_refute=True)


def separable_3way_preset() -> GenConfig:
    """For 3-way entailment training; overlap separates the collapsed classes.

    Short sequences keep per-token identity visible through unprojected
    self-attention (whose off-token weight grows with sequence length), and
    the extreme overlap bands make the collapsed classes linearly separated
    in match density: full quote, no quote, half quote plus marker.
    """
    return replace(GenConfig(),
                   claim_vocab_size=2000, doc_vocab_size=4000,
                   claim_len_min=(5,) * 5, claim_len_max=(7,) * 5,
                   doc_len_min=10, doc_len_max=12,
                   overlap_mean=(1.0, 1.0, 0.0, 0.0, 0.5),
                   overlap_std=0.0,
                   skew_refute_prob=0.0, skew_other_prob=0.0)


def biased_claim_preset() -> GenConfig:
    """Plants a claim-length signal so hypothesis-only probes can cheat."""
    return replace(GenConfig(),
                   claim_len_min=(4, 9, 14, 19, 24),
                   claim_len_max=(7, 12, 17, 22, 27),
                   claim_vocab_size=200)


def signal_free_preset() -> GenConfig:
    """Every class-conditional signal disabled; models should sit at chance.

    Overlap bands and length ranges are identical across classes, images are
    drawn independently of the pairing, no marker phrases, no domain skew.
    """
    return replace(GenConfig(),
                   claim_len_min=(8,) * 5, claim_len_max=(14,) * 5,
                   overlap_mean=(0.3,) * 5, overlap_std=0.05,
                   image_cos_target=(GenConfig().image_cos_base,) * 5,
                   refute_marker_prob=0.0,
                   skew_refute_prob=0.0, skew_other_prob=0.0)


PRESETS = {
    "table": table_preset,
    "separable_5way": separable_5way_preset,
    "separable_3way": separable_3way_preset,
    "biased_claim": biased_claim_preset,
    "signal_free": signal_free_preset,
}


def _mix_ratio(target: float, base: float) -> float | None:
    """Mixing weight for the independent component; None means uncorrelated.

    Solves target^2 (1 + 2 e m + e^2) = (1 + e m)^2 for e, with m = base.
    """
    if abs(target - base) < 0.005:
        return None
    a = target * target - base * base
    b = 2.0 * base * (target * target - 1.0)
    c = target * target - 1.0
    disc = b * b - 4.0 * a * c
    return (-b + math.sqrt(disc)) / (2.0 * a)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class _ImageSampler:
    def __init__(self, config: GenConfig):
        self.dim = config.feature_dim
        base = config.image_cos_base
        self.anchor_scale = math.sqrt(base / (1.0 - base))
        self.mix = [_mix_ratio(t, base) for t in config.image_cos_target]

    def base_vector(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim) / math.sqrt(self.dim)
        z[0] += self.anchor_scale
        return _unit(z)

    def pair(self, rng: np.random.Generator, class_idx: int
             ) -> tuple[np.ndarray, np.ndarray]:
        q = self.base_vector(rng)
        other = self.base_vector(rng)
        eps = self.mix[class_idx]
        if eps is None:
            return q, other
        return q, _unit(q + eps * other)


def _token_pools(config: GenConfig) -> tuple[list[str], list[str]]:
    claim_pool = [f"qw{i:04d}" for i in range(config.claim_vocab_size)]
    doc_pool = [f"dw{i:04d}" for i in range(config.doc_vocab_size)]
    return claim_pool, doc_pool


def _draw_domain(rng: np.random.Generator, config: GenConfig,
                 skew_prob: float) -> tuple[str, bool]:
    skewed = bool(rng.random() < skew_prob)
    if skewed:
        return config.skew_domain, True
    return config.domain_pool[int(rng.integers(len(config.domain_pool)))], False


def generate_dataset(config: GenConfig,
                     class_counts: tuple[int, ...] | None = None
                     ) -> tuple[Dataset, ImageFeatureStore]:
    """Deterministic for a fixed config; class_counts overrides n_per_class."""
    if class_counts is None:
        class_counts = (config.n_per_class,) * len(LABELS5)
    if len(class_counts) != len(LABELS5) or min(class_counts) < 0:
        raise ValueError(f"bad class_counts {class_counts}")
    rng = np.random.default_rng(config.seed)
    claim_pool, doc_pool = _token_pools(config)
    images = _ImageSampler(config)
    marker_tokens = tokenize(config.refute_marker)

    pairs = []
    store = ImageFeatureStore(config.feature_dim)
    serial = 0
    for class_idx, label in enumerate(LABELS5):
        for _ in range(class_counts[class_idx]):
            pair_id = f"{config.id_prefix}{serial:05d}"
            serial += 1

            claim_domain, _ = _draw_domain(rng, config, 0.0)
            skew_prob = (config.skew_refute_prob if class_idx == REFUTE_IDX
                         else config.skew_other_prob)
            doc_domain, skewed = _draw_domain(rng, config, skew_prob)
            ambiguous = (config.ambiguous_refute and skewed
                         and class_idx == REFUTE_IDX)

            k_q = int(rng.integers(config.claim_len_min[class_idx],
                                   config.claim_len_max[class_idx] + 1))
            claim_tokens = list(rng.choice(claim_pool, size=k_q, replace=False))

            band = SUPPORT_MULTI_IDX if ambiguous else class_idx
            ratio = float(np.clip(rng.normal(config.overlap_mean[band],
                                             config.overlap_std), 0.0, 1.0))
            n_shared = int(round(ratio * k_q))
            shared_idx = rng.choice(k_q, size=n_shared, replace=False)
            shared = [claim_tokens[i] for i in sorted(shared_idx)]

            run = shared * config.overlap_copies
            n_doc = int(rng.integers(config.doc_len_min, config.doc_len_max + 1))
            n_filler = max(n_doc - len(run), 0)
            filler = list(rng.choice(doc_pool, size=n_filler, replace=True))
            if config.contiguous_overlap:
                at = int(rng.integers(n_filler + 1))
                doc_tokens = filler[:at] + run + filler[at:]
            else:
                doc_tokens = run + filler
                order = rng.permutation(len(doc_tokens))
                doc_tokens = [doc_tokens[i] for i in order]
            if class_idx == REFUTE_IDX and not ambiguous:
                if rng.random() < config.refute_marker_prob:
                    doc_tokens = doc_tokens + marker_tokens

            ocr_q = list(rng.choice(doc_pool, size=int(
                rng.integers(config.ocr_len_min, config.ocr_len_max + 1)),
                replace=True))
            ocr_d = list(rng.choice(doc_pool, size=int(
                rng.integers(config.ocr_len_min, config.ocr_len_max + 1)),
                replace=True))

            q_feat, d_feat = images.pair(rng, class_idx)
            q_image_id = f"{pair_id}q"
            d_image_id = f"{pair_id}d"
            store.add(q_image_id, q_feat)
            store.add(d_image_id, d_feat)

            pairs.append(ClaimDocumentPair(
                id=pair_id,
                claim_text=" ".join(claim_tokens),
                doc_text=" ".join(doc_tokens),
                claim_ocr=" ".join(ocr_q),
                doc_ocr=" ".join(ocr_d),
                claim_image_id=q_image_id,
                doc_image_id=d_image_id,
                claim_image_url=f"https://{claim_domain}/img/{pair_id}q.jpg",
                doc_image_url=f"https://{doc_domain}/img/{pair_id}d.jpg",
                label=label,
            ))
    return Dataset(pairs=pairs, split_name=config.split_name), store


def generate_3way_dataset(config: GenConfig) -> tuple[Dataset, ImageFeatureStore]:
    """Balanced over the three collapsed classes; labels stay 5-way.

    n_per_class counts collapsed classes: support and insufficient pairs split
    evenly between their multimodal/text variants, refute keeps the full count.
    """
    n = config.n_per_class
    half, rest = n // 2, n - n // 2
    return generate_dataset(config, class_counts=(half, rest, half, rest, n))
