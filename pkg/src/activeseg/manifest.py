"""Dataset/round manifest schemas and byte-stable JSON persistence.

All JSON written by this package goes through ``atomic_write_json``:
sorted keys, two-space indent, trailing newline, temp-file-then-rename.
Re-serializing a loaded document reproduces the original bytes, which the
resume logic relies on.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import FormatError

DATASET_CONFIG_KEYS = ("n_b", "r_max", "tau_c", "seed", "semi_supervised", "confidence_variant")


def atomic_write_json(payload: Any, path: str | os.PathLike) -> None:
    path = Path(path)
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_json(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_of(path: str | os.PathLike) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f"sha256:{digest}"


@dataclass(frozen=True)
class SampleEntry:
    """One dataset sample: id, domain tag, tensor refs (label optional)."""

    id: str
    domain: str
    image: str
    label: str | None = None

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.id, "domain": self.domain, "image": self.image}
        if self.label is not None:
            doc["label"] = self.label
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "SampleEntry":
        return cls(
            id=str(doc["id"]),
            domain=str(doc["domain"]),
            image=str(doc["image"]),
            label=str(doc["label"]) if "label" in doc and doc["label"] is not None else None,
        )


@dataclass(frozen=True)
class DatasetManifest:
    """The dataset document: sample list plus the default run configuration."""

    samples: tuple[SampleEntry, ...]
    config: dict[str, Any]
    root: Path | None = None

    def __post_init__(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate sample ids in dataset manifest")
        missing = [k for k in DATASET_CONFIG_KEYS if k not in self.config]
        if missing:
            raise FormatError(f"dataset config missing keys: {missing}")

    def to_json(self) -> dict[str, Any]:
        return {
            "samples": [s.to_json() for s in self.samples],
            "config": {k: self.config[k] for k in DATASET_CONFIG_KEYS},
        }

    def write(self, path: str | os.PathLike) -> None:
        atomic_write_json(self.to_json(), path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        doc = read_json(path)
        if not isinstance(doc, dict) or "samples" not in doc or "config" not in doc:
            raise FormatError(f"{path}: not a dataset manifest")
        return cls(
            samples=tuple(SampleEntry.from_json(s) for s in doc["samples"]),
            config=dict(doc["config"]),
            root=Path(path).resolve().parent,
        )

    def by_id(self) -> dict[str, SampleEntry]:
        return {s.id: s for s in self.samples}

    def ids_for_domain(self, domain: str) -> list[str]:
        return [s.id for s in self.samples if s.domain == domain]

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            return Path(rel)
        return self.root / rel


@dataclass(frozen=True)
class RoundManifest:
    """Persisted state after one orchestrated round.

    ``labeled``/``unlabeled``/``pseudo`` keep acquisition order; ``excluded``
    is sorted. Checksums cover the round's written artifacts.
    """

    round: int
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    pseudo: tuple[str, ...]
    excluded: tuple[str, ...]
    score_table_path: str | None
    model_ref: str
    checksums: dict[str, str]

    def to_json(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "pseudo": list(self.pseudo),
            "excluded": list(self.excluded),
            "score_table_path": self.score_table_path,
            "model_ref": self.model_ref,
            "checksums": dict(sorted(self.checksums.items())),
        }

    def write(self, path: str | os.PathLike) -> None:
        atomic_write_json(self.to_json(), path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RoundManifest":
        doc = read_json(path)
        try:
            return cls(
                round=int(doc["round"]),
                labeled=tuple(doc["labeled"]),
                unlabeled=tuple(doc["unlabeled"]),
                pseudo=tuple(doc["pseudo"]),
                excluded=tuple(doc["excluded"]),
                score_table_path=doc["score_table_path"],
                model_ref=str(doc["model_ref"]),
                checksums=dict(doc["checksums"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a round manifest ({exc})") from exc
