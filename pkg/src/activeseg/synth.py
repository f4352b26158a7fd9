"""Synthetic two-domain volumetric dataset generator.

Volumes are smooth random organ blobs over a noisy background, with
class-dependent intensities. The target domain reuses the source anatomy
stream but applies a domain shift: a global intensity offset, reduced
foreground contrast, extra noise, and enlarged organs. Sample
informativeness varies through anatomy richness: a fraction of samples in
both domains carry large, statistics-rich organs while the rest have tiny
ones, so the value of annotating a sample genuinely differs.

With every shift knob at its neutral value the two domains produce
byte-identical volumes for the same seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError
from .manifest import DatasetManifest, SampleEntry, atomic_write_json
from .tensorfile import write_tensor

# normalized anchor positions for up to five organ blobs
_CLASS_ANCHORS = (
    (0.32, 0.32, 0.50),
    (0.68, 0.50, 0.34),
    (0.50, 0.70, 0.70),
    (0.30, 0.68, 0.36),
    (0.70, 0.32, 0.66),
)

_MAX_RETRIES = 25


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic benchmark.

    Shift knobs apply to every target sample; richness knobs split both
    domains into statistics-rich and statistics-poor anatomies.
    """

    shape: tuple[int, int, int] = (24, 24, 24)
    num_classes: int = 4
    samples_per_domain: int = 40
    seed: int = 7
    background_intensity: float = 0.15
    class_intensity_low: float = 0.45
    class_intensity_step: float = 0.20
    class_intensity_jitter: float = 0.0
    noise_sigma: float = 0.07
    organ_fraction: float = 0.05
    class_size_taper: float = 0.3
    class_profile_alpha: float = 0.55
    center_jitter: float = 0.10
    blob_smoothness: float = 2.5
    intensity_offset: float = 0.03
    contrast_shrink: float = 0.30
    noise_boost: float = 0.30
    organ_scale: float = 1.3
    rich_fraction: float = 0.30
    rich_size: float = 2.2
    poor_size: float = 0.22
    poor_noise_boost: float = 0.2
    poor_contrast_shrink: float = 0.0
    poor_palette_wobble: float = 0.5
    palette_modes: int = 1
    palette_mode_delta: float = 0.035
    palette_wobble: float = 0.0
    allow_absent_classes: bool = False
    # default run configuration embedded in the dataset manifest
    n_b: int = 2
    r_max: int = 3
    tau_c: float = 2.0
    semi_supervised: bool = True
    confidence_variant: str = "mean"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise DomainError("need at least background plus one organ class")
        if self.num_classes - 1 > len(_CLASS_ANCHORS):
            raise DomainError(
                f"at most {len(_CLASS_ANCHORS) + 1} classes supported, got {self.num_classes}"
            )
        if self.samples_per_domain < 1:
            raise DomainError("samples_per_domain must be >= 1")
        if not (0.0 <= self.rich_fraction <= 1.0):
            raise DomainError("rich_fraction must lie in [0, 1]")
        if self.organ_fraction <= 0 or self.organ_fraction * (self.num_classes - 1) > 0.5:
            raise DomainError("organ_fraction must be positive and leave room for background")

    def class_intensities(
        self,
        shift: float,
        wobble: float = 0.0,
        mode: int | None = None,
        extra_shrink: float = 0.0,
    ) -> np.ndarray:
        """Per-class mean intensities under a given shift strength.

        ``wobble`` perturbs the contrast shrink around its canonical value.
        ``mode`` selects one of the target domain's palette variants: each
        mode adds a structured, zero-mean-across-modes offset pattern to the
        foreground classes, so the population palette equals the canonical
        one but individual samples are mode-colored. ``extra_shrink``
        compresses the foreground palette further (statistics-poor samples).
        """
        base = np.empty(self.num_classes)
        base[0] = self.background_intensity
        for c in range(1, self.num_classes):
            base[c] = self.class_intensity_low + (c - 1) * self.class_intensity_step
        shrink = 1.0 - shift * self.contrast_shrink * (1.0 + wobble)
        shrink *= 1.0 - shift * extra_shrink
        out = self.background_intensity + shrink * (base - self.background_intensity)
        out = out + shift * self.intensity_offset
        if mode is not None and self.palette_modes > 1:
            for c in range(1, self.num_classes):
                out[c] += shift * self.palette_mode_delta * self.mode_pattern(mode, c)
        return out

    def mode_pattern(self, mode: int, class_index: int) -> float:
        """Cyclic +1/-1/0 pattern; zero mean per class across all modes."""
        m = mode % self.palette_modes
        slot = (class_index - 1) % self.palette_modes
        if slot == m:
            return 1.0
        if slot == (m + 1) % self.palette_modes:
            return -1.0
        return 0.0


def null_shift(cfg: SynthConfig) -> SynthConfig:
    """Copy of the config with every domain-shift knob neutralized."""
    return replace(
        cfg,
        intensity_offset=0.0,
        contrast_shrink=0.0,
        noise_boost=0.0,
        organ_scale=1.0,
        poor_noise_boost=0.0,
        poor_contrast_shrink=0.0,
        palette_wobble=0.0,
        poor_palette_wobble=0.0,
        palette_mode_delta=0.0,
    )


def _sample_rng(seed: int, index: int, retry: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, retry])


def _draw_labels(cfg: SynthConfig, rng: np.random.Generator, size_factor: float) -> np.ndarray:
    """One label volume: thresholded smooth noise blobs around jittered anchors.

    Each sample splits its total foreground budget unevenly across the organ
    classes (a spiky Dirichlet profile, mildly tapered against higher class
    indices), so any one annotation teaches a lot about one or two organs and
    little about the rest; covering every organ well takes complementary
    samples.
    """
    shape = cfg.shape
    grids = np.meshgrid(
        *(np.linspace(0.0, 1.0, n) for n in shape), indexing="ij"
    )
    labels = np.zeros(shape, dtype=np.int64)
    n_fg = cfg.num_classes - 1
    base = np.array([max(0.1, 1.0 - cfg.class_size_taper * c) for c in range(n_fg)])
    profile = rng.dirichlet(cfg.class_profile_alpha * base * n_fg / base.sum())
    total = cfg.organ_fraction * size_factor * n_fg
    for c in range(1, cfg.num_classes):
        frac = min(0.45 / n_fg, total * float(profile[c - 1]))
        anchor = np.asarray(_CLASS_ANCHORS[c - 1])
        center = anchor + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
        field = gaussian_filter(rng.standard_normal(shape), sigma=cfg.blob_smoothness)
        std = field.std()
        if std > 0:
            field = field / std
        dist_sq = sum((g - center[i]) ** 2 for i, g in enumerate(grids))
        radius = 0.16 * max(frac / cfg.organ_fraction, 0.05) ** (1.0 / 3.0)
        field = field + 3.0 * np.exp(-dist_sq / (2.0 * radius**2))
        threshold = np.quantile(field, 1.0 - frac)
        labels[field > threshold] = c
    return labels


def _render_image(
    cfg: SynthConfig,
    rng: np.random.Generator,
    labels: np.ndarray,
    shift: float,
    mode: int,
    rich: bool,
) -> np.ndarray:
    # every target sample renders a mode-colored, lightly wobbled version of
    # the canonical target palette; all shift effects scale with the domain
    # shift, so source volumes stay canonical and a zero-shift config keeps
    # the domains identical. Statistics-poor target samples are also noisier,
    # making them weak teachers and low-confidence predictions alike.
    wobble_draw = float(rng.uniform(-1.0, 1.0))
    wobble = cfg.palette_wobble
    if not rich:
        wobble += cfg.poor_palette_wobble
    wobble = shift * wobble * wobble_draw
    extra = 0.0 if rich else cfg.poor_contrast_shrink
    intensities = cfg.class_intensities(shift, wobble, mode, extra_shrink=extra)
    intensities = intensities + cfg.class_intensity_jitter * rng.standard_normal(
        cfg.num_classes
    )
    image = intensities[labels]
    sigma = cfg.noise_sigma * (1.0 + shift * cfg.noise_boost)
    if not rich:
        sigma *= 1.0 + shift * cfg.poor_noise_boost
    noise = rng.standard_normal(cfg.shape)
    return image + sigma * noise


@dataclass(frozen=True)
class SampleInfo:
    shift: float
    rich: bool
    size_factor: float
    palette_mode: int


def sample_is_rich(cfg: SynthConfig, index: int) -> bool:
    return bool(
        np.random.default_rng([cfg.seed, 999_983, index]).random() < cfg.rich_fraction
    )


def sample_palette_mode(cfg: SynthConfig, index: int) -> int:
    return int(
        np.random.default_rng([cfg.seed, 424_243, index]).integers(cfg.palette_modes)
    )


def synthesize_sample(
    cfg: SynthConfig, index: int, domain: str
) -> tuple[np.ndarray, np.ndarray, SampleInfo]:
    """Generate (image, labels, info) for one sample.

    Source and target share the same anatomy/noise stream per index, so a
    zero-shift config makes the domains identical. Missing foreground classes
    trigger a deterministic retry with a bumped sub-seed.
    """
    if domain not in ("source", "target"):
        raise DomainError(f"unknown domain {domain!r}")
    rich = sample_is_rich(cfg, index)
    mode = sample_palette_mode(cfg, index)
    shift = 1.0 if domain == "target" else 0.0
    size_factor = (1.0 + shift * (cfg.organ_scale - 1.0)) * (
        cfg.rich_size if rich else cfg.poor_size
    )
    info = SampleInfo(shift=shift, rich=rich, size_factor=size_factor, palette_mode=mode)
    for retry in range(_MAX_RETRIES):
        rng = _sample_rng(cfg.seed, index, retry)
        labels = _draw_labels(cfg, rng, size_factor)
        present = set(np.unique(labels))
        if cfg.allow_absent_classes or present >= set(range(cfg.num_classes)):
            image = _render_image(cfg, rng, labels, shift, mode, rich)
            return image, labels, info
    raise DomainError(
        f"could not draw all {cfg.num_classes} classes for sample {index} "
        f"after {_MAX_RETRIES} retries"
    )


def generate_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write both domains' tensors and the dataset manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    samples: list[SampleEntry] = []
    width = max(3, len(str(cfg.samples_per_domain - 1)))
    for domain, prefix in (("source", "src"), ("target", "tgt")):
        for i in range(cfg.samples_per_domain):
            sid = f"{prefix}_{i:0{width}d}"
            image, labels, _ = synthesize_sample(cfg, i, domain)
            image_rel = f"images/{sid}.asft"
            label_rel = f"labels/{sid}.asft"
            write_tensor(image.astype(np.float32), out / image_rel)
            write_tensor(labels.astype(np.float32), out / label_rel)
            samples.append(
                SampleEntry(id=sid, domain=domain, image=image_rel, label=label_rel)
            )
    manifest = DatasetManifest(
        samples=tuple(samples),
        config={
            "n_b": cfg.n_b,
            "r_max": cfg.r_max,
            "tau_c": cfg.tau_c,
            "seed": cfg.seed,
            "semi_supervised": cfg.semi_supervised,
            "confidence_variant": cfg.confidence_variant,
        },
    )
    manifest.write(out / "dataset.json")
    return manifest


def save_synth_config(cfg: SynthConfig, path: str | os.PathLike) -> None:
    payload = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
    atomic_write_json(payload, path)


def load_synth_config(path: str | os.PathLike) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if "shape" in payload:
        payload["shape"] = tuple(payload["shape"])
    return SynthConfig(**payload)
