"""Canonical data model and I/O for claim/document pairs.

A dataset is a JSONL file, one pair per line. Image features live in a
separate tab-separated store keyed by image id (see ``load_feature_store``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator
from urllib.parse import urlsplit

import numpy as np


class DataFormatError(ValueError):
    """Raised when a dataset or feature-store file violates its format."""


class Label5(Enum):
    SUPPORT_MULTIMODAL = "Support_Multimodal"
    SUPPORT_TEXT = "Support_Text"
    INSUFFICIENT_MULTIMODAL = "Insufficient_Multimodal"
    INSUFFICIENT_TEXT = "Insufficient_Text"
    REFUTE = "Refute"


class Label3(Enum):
    SUPPORT = "support"
    REFUTE = "refute"
    INSUFFICIENT = "insufficient"


# Canonical orders used for probability vectors and tie-breaking.
LABELS5 = tuple(Label5)
LABELS3 = (Label3.SUPPORT, Label3.REFUTE, Label3.INSUFFICIENT)

PAIR_FIELDS = (
    "id",
    "claim_text",
    "claim_ocr",
    "claim_image_id",
    "claim_image_url",
    "doc_text",
    "doc_ocr",
    "doc_image_id",
    "doc_image_url",
    "label",
)


@dataclass(frozen=True)
class ClaimDocumentPair:
    id: str
    claim_text: str
    doc_text: str
    claim_ocr: str = ""
    doc_ocr: str = ""
    claim_image_id: str = ""
    claim_image_url: str = ""
    doc_image_id: str = ""
    doc_image_url: str = ""
    label: Label5 | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "claim_text": self.claim_text,
            "claim_ocr": self.claim_ocr,
            "claim_image_id": self.claim_image_id,
            "claim_image_url": self.claim_image_url,
            "doc_text": self.doc_text,
            "doc_ocr": self.doc_ocr,
            "doc_image_id": self.doc_image_id,
            "doc_image_url": self.doc_image_url,
            "label": None if self.label is None else self.label.value,
        }


@dataclass
class Dataset:
    pairs: list[ClaimDocumentPair] = field(default_factory=list)
    split_name: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[ClaimDocumentPair]:
        return iter(self.pairs)

    def __getitem__(self, i: int) -> ClaimDocumentPair:
        return self.pairs[i]


def map_5way_to_3way(label: Label5) -> Label3:
    if label in (Label5.SUPPORT_MULTIMODAL, Label5.SUPPORT_TEXT):
        return Label3.SUPPORT
    if label in (Label5.INSUFFICIENT_MULTIMODAL, Label5.INSUFFICIENT_TEXT):
        return Label3.INSUFFICIENT
    return Label3.REFUTE


def extract_domain(url: str) -> str:
    """Lowercased registered host of ``url``, without port or leading "www.".

    Total function: empty or unparseable URLs map to "".
    """
    if not url:
        return ""
    try:
        host = urlsplit(url).hostname
    except ValueError:
        return ""
    if not host:
        return ""
    host = host.lower()
    if host.startswith("www."):
        host = host[4:]
    return host


def _parse_pair(record: dict, line_no: int) -> ClaimDocumentPair:
    if not isinstance(record, dict):
        raise DataFormatError(f"line {line_no}: expected a JSON object")
    unknown = set(record) - set(PAIR_FIELDS)
    if unknown:
        raise DataFormatError(f"line {line_no}: unknown fields {sorted(unknown)}")
    for required in ("id", "claim_text", "doc_text"):
        value = record.get(required)
        if not isinstance(value, str) or not value.strip():
            raise DataFormatError(f"line {line_no}: missing or empty field '{required}'")
    label_str = record.get("label")
    label: Label5 | None = None
    if label_str is not None:
        try:
            label = Label5(label_str)
        except ValueError:
            raise DataFormatError(f"line {line_no}: unknown label {label_str!r}") from None
    kwargs = {}
    for name in PAIR_FIELDS:
        if name in ("id", "claim_text", "doc_text", "label"):
            continue
        value = record.get(name, "")
        if value is None:
            value = ""
        if not isinstance(value, str):
            raise DataFormatError(f"line {line_no}: field '{name}' must be a string")
        kwargs[name] = value
    return ClaimDocumentPair(
        id=record["id"],
        claim_text=record["claim_text"],
        doc_text=record["doc_text"],
        label=label,
        **kwargs,
    )


def load_dataset(path: str, feature_store_path: str | None = None, split_name: str = "") -> Dataset:
    """Load a JSONL dataset, preserving line order.

    When ``feature_store_path`` is given, every referenced image id must
    resolve in that store.
    """
    pairs: list[ClaimDocumentPair] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            pair = _parse_pair(record, line_no)
            if pair.id in seen_ids:
                raise DataFormatError(f"line {line_no}: duplicate id {pair.id!r}")
            seen_ids.add(pair.id)
            pairs.append(pair)
    ds = Dataset(pairs=pairs, split_name=split_name)
    if feature_store_path is not None:
        store = load_feature_store(feature_store_path)
        for pair in ds:
            for image_id in (pair.claim_image_id, pair.doc_image_id):
                if image_id and image_id not in store:
                    raise DataFormatError(
                        f"pair {pair.id!r}: image id {image_id!r} not in feature store"
                    )
    return ds


def save_dataset(ds: Dataset, path: str) -> None:
    """Write JSONL such that ``load_dataset`` reproduces ``ds`` field-for-field."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in ds:
            fh.write(json.dumps(pair.to_record(), ensure_ascii=False))
            fh.write("\n")


def class_counts(ds: Dataset) -> dict[Label5, int]:
    counts = {label: 0 for label in LABELS5}
    for pair in ds:
        if pair.label is None:
            raise DataFormatError(f"pair {pair.id!r} is unlabeled")
        counts[pair.label] += 1
    return counts


class ImageFeatureStore:
    """Map image_id -> fixed-length float vector; all vectors share length l."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise DataFormatError(f"feature dimension must be positive, got {dim}")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def add(self, image_id: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DataFormatError(
                f"image {image_id!r}: expected {self.dim} floats, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise DataFormatError(f"image {image_id!r}: non-finite feature values")
        self._vectors[image_id] = vec

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self._vectors[image_id]
        except KeyError:
            raise KeyError(f"image id {image_id!r} not in feature store") from None

    def ids(self) -> list[str]:
        return list(self._vectors)


def load_feature_store(path: str) -> ImageFeatureStore:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("l="):
            raise DataFormatError(f"{path}: first line must be 'l=<int>', got {header!r}")
        try:
            dim = int(header[2:])
        except ValueError:
            raise DataFormatError(f"{path}: bad dimension in header {header!r}") from None
        store = ImageFeatureStore(dim)
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                image_id, payload = line.rstrip("\n").split("\t", 1)
            except ValueError:
                raise DataFormatError(f"line {line_no}: expected '<id>\\t<floats>'") from None
            try:
                vec = np.array([float(x) for x in payload.split()], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"line {line_no}: non-numeric feature value") from None
            if vec.shape != (dim,):
                raise DataFormatError(
                    f"line {line_no}: expected {dim} floats, got {vec.shape[0]}"
                )
            store.add(image_id, vec)
    return store


def save_feature_store(store: ImageFeatureStore, path: str) -> None:
    # %.17g keeps float64 values exact across a round trip.
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"l={store.dim}\n")
        for image_id in store.ids():
            values = " ".join("%.17g" % v for v in store[image_id])
            fh.write(f"{image_id}\t{values}\n")
