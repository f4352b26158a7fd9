"""Tiny native segmentation trainer used by the desk-scale benchmark.

The model is a per-class prototype classifier over a handcrafted voxel
feature basis (intensity, box-smoothed intensity, scaled spatial
coordinates). Prediction is a softmax over negative squared
feature-to-prototype distances; training runs full-batch gradient descent
on a soft-Dice + cross-entropy objective with backtracking, so the training
loss is never allowed to increase. Its encoder summarizes per-volume hidden
features (basis features plus prediction statistics) into a fixed 16-dim
mean/variance vector, which shifts as the prototypes adapt.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DomainError, FormatError
from .kernels import entropy_terms
from .manifest import atomic_write_json
from .types import EmbeddingVec, ProbVolume

FEATURE_DIM = 5
HIDDEN_DIM = FEATURE_DIM + 3  # basis + (max prob, normalized entropy, background prob)
# pooled hidden stats, standardized, plus one constant anchor dimension
EMBED_DIM = 2 * HIDDEN_DIM + 1
# coordinates enter the basis with a small weight: a full-weight spatial
# prior overfits badly at few-shot scale (prototypes memorize the labeled
# samples' organ positions)
COORD_SCALE = 0.1
DEFAULT_TEMPERATURE = 0.06
DEFAULT_LEARNING_RATE = 0.05
# relative weight of the constant anchor dimension: larger values temper the
# cosine geometry (outlier samples look less extreme)
EMBED_ANCHOR = 4.0
DICE_EPS = 1e-6
_LOG_FLOOR = 1e-12
_SCALE_FLOOR = 1e-3


def voxel_features(image: np.ndarray) -> np.ndarray:
    """Feature basis per voxel, shape (FEATURE_DIM, H, W, D)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DomainError(f"image must be a 3-D volume, got shape {image.shape}")
    smoothed = uniform_filter(image, size=3, mode="nearest")
    coords = np.meshgrid(
        *(np.linspace(0.0, 1.0, n) for n in image.shape), indexing="ij"
    )
    feats = np.stack([image, smoothed] + [COORD_SCALE * c for c in coords])
    return feats


def _flatten(feats: np.ndarray) -> np.ndarray:
    return feats.reshape(feats.shape[0], -1)  # (F, V)


@dataclass(frozen=True)
class ToyModel:
    """Prototype classifier: prototypes (C, FEATURE_DIM) plus softmax temperature.

    ``embed_center``/``embed_scale`` hold per-dimension standardization
    statistics for the encoder output, computed once from the pre-training
    data and inherited unchanged by every fine-tuned descendant; without
    them the pooled stats share a large common component that crushes all
    cosine distances toward zero.
    """

    prototypes: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    embed_center: np.ndarray | None = None
    embed_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] < 2 or protos.shape[1] != FEATURE_DIM:
            raise DomainError(
                f"prototypes must have shape (C>=2, {FEATURE_DIM}), got {protos.shape}"
            )
        if self.temperature <= 0:
            raise DomainError("softmax temperature must be positive")
        object.__setattr__(self, "prototypes", protos)
        for name in ("embed_center", "embed_scale"):
            value = getattr(self, name)
            if value is not None:
                arr = np.asarray(value, dtype=np.float64)
                if arr.shape != (2 * HIDDEN_DIM,):
                    raise DomainError(f"{name} must have shape ({2 * HIDDEN_DIM},)")
                object.__setattr__(self, name, arr)

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])

    def _probs_flat(self, feats_flat: np.ndarray) -> np.ndarray:
        diffs = feats_flat[np.newaxis, :, :] - self.prototypes[:, :, np.newaxis]
        logits = -(diffs**2).sum(axis=1) / self.temperature  # (C, V)
        logits -= logits.max(axis=0, keepdims=True)
        expd = np.exp(logits)
        return expd / expd.sum(axis=0, keepdims=True)

    def predict_probs(self, image: np.ndarray) -> np.ndarray:
        feats = voxel_features(image)
        probs = self._probs_flat(_flatten(feats))
        return probs.reshape((self.num_classes,) + image.shape)

    def predict(self, image: np.ndarray, sample_id: str) -> ProbVolume:
        return ProbVolume(self.predict_probs(image), sample_id)

    def predict_labels(self, image: np.ndarray) -> np.ndarray:
        return self.predict_probs(image).argmax(axis=0)

    def pooled_stats(self, image: np.ndarray) -> np.ndarray:
        """Raw pooled encoder stats: foreground-weighted mean and variance of
        each hidden feature.

        Hidden features are the raw basis plus three prediction-derived maps
        (top probability, entropy normalized by ln C, background probability).
        Pooling weights each voxel by its predicted foreground-ness (with a
        small floor), so the vector tracks the model's view of the organs and
        moves when adaptation changes that view; plain volume-wide means
        would be swamped by the background.
        """
        feats = voxel_features(image)
        probs = self._probs_flat(_flatten(feats))
        ent = entropy_terms(probs).sum(axis=0) / np.log(self.num_classes)
        hidden = np.concatenate(
            [_flatten(feats), probs.max(axis=0)[None, :], ent[None, :], probs[0][None, :]]
        )
        weights = 0.02 + 0.98 * (1.0 - probs[0])
        total = weights.sum()
        mean = (hidden * weights).sum(axis=1) / total
        var = (weights * (hidden - mean[:, None]) ** 2).sum(axis=1) / total
        return np.concatenate([mean, var])

    def embed(self, image: np.ndarray, sample_id: str, encoder_round: int) -> EmbeddingVec:
        """Pooled, standardized encoder vector plus a constant anchor dim.

        The anchor dimension keeps the norm bounded away from zero for
        degenerate inputs and tempers cosine distances between outliers.
        """
        pooled = self.pooled_stats(image)
        if self.embed_center is not None and self.embed_scale is not None:
            pooled = (pooled - self.embed_center) / self.embed_scale
        return EmbeddingVec(np.append(pooled, EMBED_ANCHOR), sample_id, encoder_round)

    def save(self, path: str | os.PathLike) -> None:
        doc = {
            "kind": "toy-prototype-model",
            "temperature": self.temperature,
            "prototypes": [[float(v) for v in row] for row in self.prototypes],
        }
        if self.embed_center is not None and self.embed_scale is not None:
            doc["embed_center"] = [float(v) for v in self.embed_center]
            doc["embed_scale"] = [float(v) for v in self.embed_scale]
        atomic_write_json(doc, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ToyModel":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict) or doc.get("kind") != "toy-prototype-model":
            raise FormatError(f"{path}: not a toy model file")
        center = doc.get("embed_center")
        scale = doc.get("embed_scale")
        return cls(
            prototypes=np.asarray(doc["prototypes"], dtype=np.float64),
            temperature=float(doc["temperature"]),
            embed_center=np.asarray(center, dtype=np.float64) if center is not None else None,
            embed_scale=np.asarray(scale, dtype=np.float64) if scale is not None else None,
        )

    def with_embed_norm(self, center: np.ndarray, scale: np.ndarray) -> "ToyModel":
        return ToyModel(self.prototypes, self.temperature, center, scale)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    flat = np.asarray(labels, dtype=np.int64).reshape(-1)
    if flat.min() < 0 or flat.max() >= num_classes:
        raise DomainError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{flat.min()}, {flat.max()}]"
        )
    onehot = np.zeros((num_classes, flat.size))
    onehot[flat, np.arange(flat.size)] = 1.0
    return onehot


def composite_loss(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Soft-Dice loss plus mean cross-entropy for one volume (flattened)."""
    v = probs.shape[1]
    ce = float(-(onehot * np.log(np.clip(probs, _LOG_FLOOR, None))).sum() / v)
    inter = (probs * onehot).sum(axis=1)
    sums = probs.sum(axis=1) + onehot.sum(axis=1)
    dice = (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
    return float(1.0 - dice.mean()) + ce


def _loss_and_grad(
    protos: np.ndarray,
    temperature: float,
    feats: np.ndarray,
    onehot: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted composite loss and its prototype gradient, all pairs stacked.

    ``feats`` is (P, F, V) float32, ``onehot`` (P, C, V) float32, ``labels``
    (P, V) int, ``weights`` (P,).
    """
    c = protos.shape[0]
    v = feats.shape[2]
    w_total = float(weights.sum())
    protos32 = protos.astype(np.float32)

    # heavy per-voxel math runs in float32; the prototype update stays float64
    f_sq = np.einsum("pfv,pfv->pv", feats, feats)
    cross = np.einsum("pfv,cf->pcv", feats, protos32)
    m_sq = np.einsum("cf,cf->c", protos32, protos32)
    logits = (2.0 * cross - f_sq[:, None, :] - m_sq[None, :, None]) / np.float32(temperature)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    probs = logits / logits.sum(axis=1, keepdims=True)

    p_true = np.take_along_axis(probs, labels[:, None, :], axis=1)[:, 0, :]
    ce = -np.log(np.clip(p_true, _LOG_FLOOR, None)).sum(axis=1) / v
    inter = (probs * onehot).sum(axis=2)
    sums = probs.sum(axis=2) + onehot.sum(axis=2)
    num = 2.0 * inter + DICE_EPS
    den = sums + DICE_EPS
    dice_loss = 1.0 - (num / den).mean(axis=1)
    loss = float(((ce.astype(np.float64) + dice_loss) * weights).sum() / w_total)

    # cross-entropy backprop straight to the logits; soft-Dice goes through
    # dL/dp and the softmax Jacobian
    dlogits = (probs - onehot) / np.float32(v)
    dldp = -(2.0 * onehot * den[:, :, None] - num[:, :, None]) / (c * den[:, :, None] ** 2)
    dlogits += probs * (dldp - (dldp * probs).sum(axis=1, keepdims=True))
    dlogits *= weights.astype(np.float32)[:, None, None]

    # logits_c = -|f - mu_c|^2 / T  =>  d logits_c / d mu_c = 2 (f - mu_c) / T
    coef = 2.0 / temperature
    grad = coef * (
        np.einsum("pcv,pfv->cf", dlogits, feats).astype(np.float64)
        - protos * dlogits.sum(axis=(0, 2)).astype(np.float64)[:, None]
    )
    return loss, grad / w_total


def _closed_form_prototypes(
    feats_flat: Sequence[np.ndarray],
    onehots: Sequence[np.ndarray],
    weights: Sequence[float],
    num_classes: int,
) -> np.ndarray:
    """Weighted per-class feature means; absent classes fall back to the
    global mean nudged by the class index so prototypes stay distinct."""
    feat_sum = np.zeros((num_classes, FEATURE_DIM))
    count = np.zeros(num_classes)
    global_sum = np.zeros(FEATURE_DIM)
    global_count = 0.0
    for feats, onehot, w in zip(feats_flat, onehots, weights):
        feat_sum += w * (onehot @ feats.T).astype(np.float64)
        count += w * onehot.sum(axis=1, dtype=np.float64)
        global_sum += w * feats.sum(axis=1, dtype=np.float64)
        global_count += w * feats.shape[1]
    global_mean = global_sum / max(global_count, 1.0)
    protos = np.empty((num_classes, FEATURE_DIM))
    for cls in range(num_classes):
        if count[cls] > 0:
            protos[cls] = feat_sum[cls] / count[cls]
        else:
            protos[cls] = global_mean + 0.01 * (cls + 1)
    return protos


def toy_fit(
    labeled_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    pseudo_pairs: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    epochs: int = 30,
    seed: int = 0,
    init: ToyModel | None = None,
    num_classes: int | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    pseudo_weight: float = 1.0,
) -> ToyModel:
    """Fit prototypes on (image, label) pairs, optionally from a warm start.

    With no ``init`` the prototypes start from closed-form class means;
    ``epochs`` gradient steps with backtracking then descend the composite
    objective, so the loss over the given pairs is nonincreasing. Pseudo
    pairs join the objective with ``pseudo_weight``. Fully deterministic:
    ``seed`` is accepted for protocol compatibility but nothing is sampled.
    """
    del seed
    if len(labeled_pairs) == 0:
        raise DomainError("toy_fit needs at least one labeled pair")
    embed_center = embed_scale = None
    if init is not None:
        num_classes = init.num_classes
        temperature = init.temperature
        embed_center = init.embed_center
        embed_scale = init.embed_scale
    elif num_classes is None:
        observed = max(int(np.max(lbl)) for _, lbl in list(labeled_pairs) + list(pseudo_pairs))
        num_classes = max(2, observed + 1)

    feats_list = []
    label_list = []
    weight_list = []
    for image, labels in labeled_pairs:
        feats_list.append(_flatten(voxel_features(image)).astype(np.float32))
        label_list.append(np.asarray(labels, dtype=np.int64).reshape(-1))
        weight_list.append(1.0)
    for image, labels in pseudo_pairs:
        feats_list.append(_flatten(voxel_features(image)).astype(np.float32))
        label_list.append(np.asarray(labels, dtype=np.int64).reshape(-1))
        weight_list.append(pseudo_weight)
    voxel_counts = {f.shape[1] for f in feats_list}
    if len(voxel_counts) != 1:
        raise DomainError("all training volumes must share one shape")
    onehot_list = [_one_hot(lbl, num_classes).astype(np.float32) for lbl in label_list]
    feats = np.stack(feats_list)
    onehot = np.stack(onehot_list)
    labels_arr = np.stack(label_list)
    weights = np.asarray(weight_list)

    if init is not None:
        protos = init.prototypes.copy()
    else:
        protos = _closed_form_prototypes(feats_list, onehot_list, weight_list, num_classes)

    loss, grad = _loss_and_grad(protos, temperature, feats, onehot, labels_arr, weights)
    for _ in range(epochs):
        step = learning_rate
        improved = None
        for _ in range(24):
            trial = protos - step * grad
            trial_loss, trial_grad = _loss_and_grad(
                trial, temperature, feats, onehot, labels_arr, weights
            )
            if trial_loss <= loss:
                improved = (trial, trial_loss, trial_grad)
                break
            step *= 0.5
        if improved is None:
            break
        protos, loss, grad = improved
    return ToyModel(protos, temperature, embed_center, embed_scale)
