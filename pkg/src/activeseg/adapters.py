"""Trainer and oracle adapters.

The orchestrator only ever talks to the small protocol below, so any
learner can plug in: the bundled toy trainer implements it in-process, and
``SubprocessTrainerAdapter`` drives an external command through a JSON job
file, exchanging tensors in the package tensor format.
"""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import AdapterError
from .manifest import atomic_write_json
from .tensorfile import read_tensor, write_tensor
from .toymodel import ToyModel, toy_fit
from .types import EmbeddingVec, ProbVolume

Pair = tuple[str, str]  # (image path, label path)


@dataclass(frozen=True)
class ModelHandle:
    """Opaque model reference: a path string plus an adapter-private payload."""

    ref: str
    payload: Any = None


class TrainerAdapter(Protocol):
    """Behavioral contract every trainer must satisfy.

    All methods must be deterministic given their inputs and seed; ``embed``
    must return vectors of one fixed length for the whole run.
    """

    def pretrained(self) -> ModelHandle: ...

    def fit(
        self,
        labeled: Sequence[Pair],
        pseudo: Sequence[Pair],
        epochs: int,
        seed: int,
        init: ModelHandle | None,
        model_out: str,
    ) -> ModelHandle: ...

    def embed(
        self, model: ModelHandle, image_path: str, sample_id: str, encoder_round: int
    ) -> EmbeddingVec: ...

    def predict(self, model: ModelHandle, image_path: str, sample_id: str) -> ProbVolume: ...


class OracleAdapter(Protocol):
    def annotate(self, sample_ids: Sequence[str]) -> dict[str, str]: ...


class FileOracle:
    """Desk-scale oracle: annotations come from ground-truth label files."""

    def __init__(self, labels_by_id: dict[str, str]):
        self._labels = dict(labels_by_id)

    def annotate(self, sample_ids: Sequence[str]) -> dict[str, str]:
        out = {}
        for sid in sample_ids:
            path = self._labels.get(sid)
            if path is None or not Path(path).is_file():
                raise AdapterError(f"oracle has no label file for sample {sid!r}")
            out[sid] = path
        return out


class ToyTrainerAdapter:
    """In-process adapter around the prototype toy trainer.

    The pre-adaptation model is fitted once on the supplied source-domain
    pairs and cached at ``pretrained_path``; reruns reuse the cache.
    """

    def __init__(
        self,
        pretrain_pairs: Sequence[Pair],
        pretrained_path: str,
        pretrain_epochs: int = 30,
        num_classes: int | None = None,
        pseudo_weight: float = 0.5,
    ):
        self._pretrain_pairs = list(pretrain_pairs)
        self._pretrained_path = str(pretrained_path)
        self._pretrain_epochs = pretrain_epochs
        self._num_classes = num_classes
        self._pseudo_weight = pseudo_weight
        self._image_cache: dict[str, np.ndarray] = {}
        self._model_cache: dict[str, ToyModel] = {}

    def _read_image(self, path: str) -> np.ndarray:
        arr = self._image_cache.get(path)
        if arr is None:
            arr = read_tensor(path).astype(np.float64)
            self._image_cache[path] = arr
        return arr

    def _read_pairs(self, pairs: Sequence[Pair]) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for image_path, label_path in pairs:
            image = self._read_image(image_path)
            labels = read_tensor(label_path).astype(np.int64)
            out.append((image, labels))
        return out

    def _resolve(self, model: ModelHandle) -> ToyModel:
        if isinstance(model.payload, ToyModel):
            return model.payload
        cached = self._model_cache.get(model.ref)
        if cached is None:
            cached = ToyModel.load(model.ref)
            self._model_cache[model.ref] = cached
        return cached

    def pretrained(self) -> ModelHandle:
        path = Path(self._pretrained_path)
        if not path.is_file():
            if not self._pretrain_pairs:
                raise AdapterError("no cached pre-trained model and no source pairs to fit one")
            pairs = self._read_pairs(self._pretrain_pairs)
            model = toy_fit(
                pairs,
                epochs=self._pretrain_epochs,
                num_classes=self._num_classes,
            )
            # standardization stats for the encoder come from the
            # pre-training data and stay fixed for every descendant model
            stats = np.stack([model.pooled_stats(image) for image, _ in pairs])
            scale = np.maximum(stats.std(axis=0), 1e-3)
            model = model.with_embed_norm(stats.mean(axis=0), scale)
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
        return ModelHandle(ref=str(path), payload=ToyModel.load(path))

    def fit(
        self,
        labeled: Sequence[Pair],
        pseudo: Sequence[Pair],
        epochs: int,
        seed: int,
        init: ModelHandle | None,
        model_out: str,
    ) -> ModelHandle:
        try:
            model = toy_fit(
                self._read_pairs(labeled),
                self._read_pairs(pseudo),
                epochs=epochs,
                seed=seed,
                init=self._resolve(init) if init is not None else None,
                num_classes=self._num_classes,
                pseudo_weight=self._pseudo_weight,
            )
        except Exception as exc:
            raise AdapterError(f"toy trainer fit failed: {exc}") from exc
        Path(model_out).parent.mkdir(parents=True, exist_ok=True)
        model.save(model_out)
        self._model_cache[model_out] = model
        return ModelHandle(ref=model_out, payload=model)

    def embed(
        self, model: ModelHandle, image_path: str, sample_id: str, encoder_round: int
    ) -> EmbeddingVec:
        return self._resolve(model).embed(self._read_image(image_path), sample_id, encoder_round)

    def predict(self, model: ModelHandle, image_path: str, sample_id: str) -> ProbVolume:
        return self._resolve(model).predict(self._read_image(image_path), sample_id)


class SubprocessTrainerAdapter:
    """Drives an external trainer through the JSON job-file wire protocol.

    Each call writes a job document, invokes ``command <job path>`` and, on
    exit status 0, reads the declared tensor outputs. Models stay opaque:
    the external trainer reads/writes them at the paths the job names.
    """

    def __init__(self, command: Sequence[str], workdir: str, pretrained_model: str):
        self._command = list(command)
        self._workdir = Path(workdir)
        self._workdir.mkdir(parents=True, exist_ok=True)
        self._pretrained_model = str(pretrained_model)
        self._job_counter = 0

    def _run_job(self, job: dict) -> None:
        self._job_counter += 1
        job_path = self._workdir / f"job_{self._job_counter:06d}.json"
        atomic_write_json(job, job_path)
        proc = subprocess.run(
            self._command + [str(job_path)],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise AdapterError(
                f"external trainer failed on {job['op']} job (exit {proc.returncode}): "
                f"{proc.stderr.strip()[-500:]}"
            )

    def pretrained(self) -> ModelHandle:
        if not Path(self._pretrained_model).is_file():
            self._run_job({"op": "pretrained", "model_out": self._pretrained_model})
        return ModelHandle(ref=self._pretrained_model)

    def fit(
        self,
        labeled: Sequence[Pair],
        pseudo: Sequence[Pair],
        epochs: int,
        seed: int,
        init: ModelHandle | None,
        model_out: str,
    ) -> ModelHandle:
        Path(model_out).parent.mkdir(parents=True, exist_ok=True)
        self._run_job(
            {
                "op": "fit",
                "epochs": epochs,
                "seed": seed,
                "init": init.ref if init is not None else None,
                "model_out": model_out,
                "labeled": [{"image": img, "label": lbl} for img, lbl in labeled],
                "pseudo": [{"image": img, "label": lbl} for img, lbl in pseudo],
            }
        )
        if not Path(model_out).is_file():
            raise AdapterError(f"external trainer exited 0 but wrote no model at {model_out}")
        return ModelHandle(ref=model_out)

    def _tensor_op(self, op: str, model: ModelHandle, image_path: str) -> np.ndarray:
        out_path = self._workdir / f"{op}_{self._job_counter + 1:06d}.asft"
        self._run_job(
            {"op": op, "model": model.ref, "image": image_path, "output": str(out_path)}
        )
        try:
            result = read_tensor(out_path)
        finally:
            if out_path.is_file():
                os.unlink(out_path)
        return result

    def embed(
        self, model: ModelHandle, image_path: str, sample_id: str, encoder_round: int
    ) -> EmbeddingVec:
        vec = self._tensor_op("embed", model, image_path)
        if vec.ndim != 1:
            raise AdapterError(f"external trainer returned a {vec.ndim}-D embedding")
        return EmbeddingVec(vec.astype(np.float64), sample_id, encoder_round)

    def predict(self, model: ModelHandle, image_path: str, sample_id: str) -> ProbVolume:
        probs = self._tensor_op("predict", model, image_path)
        return ProbVolume(probs.astype(np.float64), sample_id)


def run_toy_trainer_job(job_path: str) -> None:
    """Entry point for using the toy trainer *as* an external wire-protocol
    trainer (exercised by the CLI and the protocol tests)."""
    with open(job_path, encoding="utf-8") as fh:
        job = json.load(fh)
    op = job["op"]
    if op == "fit":
        pairs = [(d["image"], d["label"]) for d in job["labeled"]]
        pseudo = [(d["image"], d["label"]) for d in job.get("pseudo", [])]
        adapter = ToyTrainerAdapter([], pretrained_path="", pretrain_epochs=0)
        init = ModelHandle(ref=job["init"]) if job.get("init") else None
        adapter.fit(pairs, pseudo, int(job["epochs"]), int(job.get("seed", 0)), init, job["model_out"])
    elif op in ("embed", "predict"):
        model = ToyModel.load(job["model"])
        image = read_tensor(job["image"]).astype(np.float64)
        if op == "embed":
            vec = model.embed(image, sample_id="wire", encoder_round=0)
            write_tensor(vec.values.astype(np.float32), job["output"])
        else:
            write_tensor(model.predict_probs(image).astype(np.float32), job["output"])
    else:
        raise AdapterError(f"unknown wire-protocol op {op!r}")
