"""Region vocabulary and the JSON sidecar files (labels and predictions)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import jsonschema

from ._io import atomic_write_json
from .errors import LabelParseError, PreconditionError, VocabularyError

PREDICTION_THRESHOLD = 0.5

# Six names appear in the source material; the rest are stand-ins for the
# remaining anatomical regions and can be overridden per dataset.
DEFAULT_REGIONS = (
    "head",
    "neck",
    "shoulder",
    "chest",
    "spine",
    "upper_arm",
    "forearm_hand",
    "abdomen",
    "pelvis",
    "thigh",
    "patella",
    "shin",
    "tarsal",
    "foot",
)


class LabelVocabulary:
    """Ordered, fixed-size list of region names."""

    size = 14

    def __init__(self, names: Sequence[str] = DEFAULT_REGIONS):
        names = tuple(names)
        if len(names) != self.size:
            raise PreconditionError(f"vocabulary needs exactly {self.size} names, got {len(names)}")
        if len(set(names)) != len(names):
            raise PreconditionError("vocabulary names must be unique")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVocabulary) and other.names == self.names

    def __repr__(self) -> str:
        return f"LabelVocabulary({list(self.names)!r})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise VocabularyError(f"unknown region {name!r}") from None

    def encode(self, regions: Iterable[str]) -> List[int]:
        """Multi-hot vector in vocabulary order."""
        vec = [0] * len(self.names)
        for r in regions:
            vec[self.index(r)] = 1
        return vec

    def decode(self, flags) -> List[str]:
        return [n for n, f in zip(self.names, flags) if f]


DEFAULT_VOCABULARY = LabelVocabulary()


@dataclass(frozen=True)
class LabelFile:
    case_id: str
    regions: tuple

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))

    def validate(self, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> "LabelFile":
        for r in self.regions:
            vocab.index(r)
        if len(set(self.regions)) != len(self.regions):
            raise LabelParseError(f"duplicate region in label file for {self.case_id!r}")
        return self

    def to_json(self) -> dict:
        return {"case_id": self.case_id, "regions": list(self.regions)}


LABEL_SCHEMA = {
    "type": "object",
    "required": ["case_id", "regions"],
    "properties": {
        "case_id": {"type": "string"},
        "regions": {"type": "array", "items": {"type": "string"}},
    },
}


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LabelParseError(f"{path}: malformed JSON: {exc}") from exc


def parse_labels(doc, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> LabelFile:
    try:
        jsonschema.validate(doc, LABEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise LabelParseError(f"label document invalid: {exc.message}") from exc
    return LabelFile(doc["case_id"], doc["regions"]).validate(vocab)


def read_labels(path, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> LabelFile:
    return parse_labels(_load_json(path), vocab)


def write_labels(label: LabelFile, path) -> None:
    atomic_write_json(path, label.to_json())


@dataclass
class SeriesPrediction:
    case_id: str
    series_id: str
    probabilities: List[float] = field(default_factory=list)
    elapsed_ms: float = 0.0
    error: str | None = None

    @property
    def predicted(self) -> List[bool]:
        return [p >= PREDICTION_THRESHOLD for p in self.probabilities]

    def to_json(self, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> dict:
        if self.error is not None:
            return {"series_id": self.series_id, "error": self.error, "elapsed_ms": self.elapsed_ms}
        return {
            "series_id": self.series_id,
            "probabilities": {n: float(p) for n, p in zip(vocab.names, self.probabilities)},
            "predicted": vocab.decode(self.predicted),
            "elapsed_ms": float(self.elapsed_ms),
        }


def _prediction_schema(vocab: LabelVocabulary) -> dict:
    region_enum = {"type": "string", "enum": list(vocab.names)}
    ok_item = {
        "type": "object",
        "required": ["series_id", "probabilities", "predicted", "elapsed_ms"],
        "additionalProperties": False,
        "properties": {
            "series_id": {"type": "string"},
            "probabilities": {
                "type": "object",
                "required": list(vocab.names),
                "additionalProperties": False,
                "properties": {n: {"type": "number", "minimum": 0, "maximum": 1} for n in vocab.names},
            },
            "predicted": {"type": "array", "items": region_enum, "uniqueItems": True},
            "elapsed_ms": {"type": "number", "minimum": 0},
        },
    }
    err_item = {
        "type": "object",
        "required": ["series_id", "error"],
        "additionalProperties": False,
        "properties": {
            "series_id": {"type": "string"},
            "error": {"type": "string"},
            "elapsed_ms": {"type": "number", "minimum": 0},
        },
    }
    return {
        "type": "object",
        "required": ["case_id", "series"],
        "additionalProperties": False,
        "properties": {
            "case_id": {"type": "string"},
            "series": {"type": "array", "items": {"oneOf": [ok_item, err_item]}},
        },
    }


PREDICTION_SCHEMA = _prediction_schema(DEFAULT_VOCABULARY)


def validate_prediction_doc(doc, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> None:
    """Schema check plus the cross-field rule ``predicted == {p >= 0.5}``."""
    schema = PREDICTION_SCHEMA if vocab == DEFAULT_VOCABULARY else _prediction_schema(vocab)
    jsonschema.validate(doc, schema)
    for item in doc["series"]:
        if "error" in item:
            continue
        expected = [n for n in vocab.names if item["probabilities"][n] >= PREDICTION_THRESHOLD]
        if sorted(expected, key=vocab.index) != sorted(item["predicted"], key=vocab.index):
            raise jsonschema.ValidationError(f"predicted flags disagree with probabilities in {item['series_id']}")


def predictions_doc(records: Sequence[SeriesPrediction], vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> dict:
    if not records:
        raise PreconditionError("no prediction records")
    case_ids = {r.case_id for r in records}
    if len(case_ids) != 1:
        raise PreconditionError(f"records span several cases: {sorted(case_ids)}")
    for r in records:
        if r.error is None and (
            len(r.probabilities) != len(vocab) or any(not (0.0 <= p <= 1.0) or math.isnan(p) for p in r.probabilities)
        ):
            raise PreconditionError(f"bad probability vector for series {r.series_id!r}")
    ordered = sorted(records, key=lambda r: r.series_id)
    return {"case_id": ordered[0].case_id, "series": [r.to_json(vocab) for r in ordered]}


def write_predictions(records: Sequence[SeriesPrediction], path, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> dict:
    doc = predictions_doc(records, vocab)
    validate_prediction_doc(doc, vocab)
    atomic_write_json(path, doc)
    return doc


def read_predictions(path, vocab: LabelVocabulary = DEFAULT_VOCABULARY) -> List[SeriesPrediction]:
    doc = _load_json(path)
    try:
        validate_prediction_doc(doc, vocab)
    except jsonschema.ValidationError as exc:
        raise LabelParseError(f"{path}: prediction document invalid: {exc.message}") from exc
    out = []
    for item in doc["series"]:
        if "error" in item:
            out.append(SeriesPrediction(doc["case_id"], item["series_id"], [], item.get("elapsed_ms", 0.0), item["error"]))
        else:
            probs = [item["probabilities"][n] for n in vocab.names]
            out.append(SeriesPrediction(doc["case_id"], item["series_id"], probs, item["elapsed_ms"]))
    return out
