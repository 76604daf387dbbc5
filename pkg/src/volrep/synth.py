"""Synthetic paired (volume, report) generator with exact ground truth.

Each sample is a smooth low-intensity background (HU around -720) with
1-4 non-overlapping high-intensity lesions of distinct types. Every
lesion yields one findings sentence naming its type and the octant of
its center, so sentence-to-sub-region alignment is learnable and its
failure detectable. Ground-truth patch sets are emitted at generation
time from the lesion voxel masks, never recovered post hoc.

A lesion's voxel mask is the region where its added intensity is at
least `mask_cut` times its amplitude; truth patches are the patches
containing at least one such voxel.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .text import Vocab
from .volume import Volume, save_svol, load_svol

GEN_STREAM = 77  # fixed sub-stream so generation never couples to other draws


class GenerationError(RuntimeError):
    """Lesion placement failed within the retry budget."""


@dataclass
class LesionType:
    name: str
    r_range: tuple          # in-plane radius range, voxels
    z_scale: float          # z radius = in-plane radius * z_scale
    amp_range: tuple        # added intensity at the blob center, HU
    elongated: bool = False # stretch along x or y into a band


DEFAULT_TYPES = (
    LesionType("nodule", (2.2, 3.2), 0.7, (600.0, 900.0)),
    LesionType("mass", (4.2, 5.4), 0.6, (600.0, 900.0)),
    LesionType("band", (1.4, 2.0), 1.0, (550.0, 850.0), elongated=True),
    LesionType("haze", (4.5, 6.0), 0.6, (450.0, 600.0)),
)

_SENTENCE_TEMPLATES = (
    "A {size} {name} is seen in the {octant} region.",
    "There is a {size} {name} in the {octant} region.",
)

_BG_BASE = -720.0
_BG_MODES = 3
_BG_AMP = (10.0, 18.0)


@dataclass
class GenConfig:
    dims: tuple = (32, 32, 16)           # (H, W, D)
    spacing: tuple = (1.0, 1.0, 1.0)
    patch_dims: tuple = (8, 8, 4)
    lesion_min: int = 1
    lesion_max: int = 4
    mask_cut: float = 0.4
    max_retries: int = 200
    types: tuple = field(default_factory=lambda: DEFAULT_TYPES)

    def __post_init__(self):
        if not 1 <= self.lesion_min <= self.lesion_max <= len(self.types):
            raise ValueError(
                f"need 1 <= lesion_min <= lesion_max <= {len(self.types)}, "
                f"got ({self.lesion_min}, {self.lesion_max})"
            )

    @property
    def type_names(self) -> list:
        return [t.name for t in self.types]

    @property
    def expected_prevalence(self) -> float:
        """Per-type presence probability: E[lesion count] / n_types."""
        counts = range(self.lesion_min, self.lesion_max + 1)
        return (sum(counts) / len(counts)) / len(self.types)


@dataclass
class SyntheticSample:
    volume: Volume
    report_text: str
    sentence_truth: list      # per sentence, sorted np array of patch indices
    labels: np.ndarray        # binary, one per lesion type
    lesion_masks: list        # per sentence, flat voxel indices above the cut
    support_masks: list       # per sentence, flat voxel indices the blob touches


def corpus_vocab(cfg: GenConfig | None = None) -> Vocab:
    """Closed vocabulary covering everything the generator can emit."""
    names = (cfg or GenConfig()).type_names
    words = [
        "findings", "impression",
        "a", "there", "is", "are", "seen", "in", "the", "region",
        "small", "large",
        "upper", "lower", "left", "right", "anterior", "posterior",
        *names,
        "and", "present",
        ".", ",", ":", "!", "?",
        *[str(d) for d in range(10)],
    ]
    return Vocab.from_words(words)


def _octant_words(center, dims) -> str:
    h, w, d = dims
    cx, cy, cz = center
    vertical = "upper" if cz < d / 2 else "lower"
    lateral = "left" if cx < w / 2 else "right"
    depth = "anterior" if cy < h / 2 else "posterior"
    return f"{vertical} {lateral} {depth}"


def _place_lesion(rng: Rng, cfg: GenConfig, ltype: LesionType, existing) -> dict:
    """Draw radii and a center keeping clear of earlier lesions."""
    h, w, d = cfg.dims
    lo, hi = ltype.r_range
    r = lo + (hi - lo) * rng.uniform(1)[0]
    if ltype.elongated:
        long_axis = 3.0 * r + 2.0 * rng.uniform(1)[0]
        if rng.below(2):
            rx, ry = long_axis, r
        else:
            rx, ry = r, long_axis
    else:
        rx = ry = r
    rz = max(1.2, r * ltype.z_scale)

    for _ in range(cfg.max_retries):
        cx = 2 + rng.below(max(1, w - 4))
        cy = 2 + rng.below(max(1, h - 4))
        cz = 2 + rng.below(max(1, d - 4))
        reach = max(rx, ry, rz)
        clear = all(
            math.dist((cx, cy, cz), other["center"]) >= 0.9 * (reach + other["reach"])
            for other in existing
        )
        if clear:
            amp_lo, amp_hi = ltype.amp_range
            return {
                "type": ltype,
                "center": (cx, cy, cz),
                "radii": (rx, ry, rz),
                "reach": reach,
                "amp": amp_lo + (amp_hi - amp_lo) * rng.uniform(1)[0],
            }
    raise GenerationError(
        f"could not place lesion '{ltype.name}' after {cfg.max_retries} attempts"
    )


def _background(rng: Rng, dims) -> np.ndarray:
    """Smooth low-frequency field around the base intensity, (D, H, W)."""
    h, w, d = dims
    z, y, x = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    out = np.full((d, h, w), _BG_BASE)
    for _ in range(_BG_MODES):
        amp = _BG_AMP[0] + (_BG_AMP[1] - _BG_AMP[0]) * rng.uniform(1)[0]
        fx, fy, fz = (0.5 + 1.5 * u for u in rng.uniform(3))
        phase = 2 * np.pi * rng.uniform(1)[0]
        out += amp * np.cos(
            2 * np.pi * (fx * x / w + fy * y / h + fz * z / d) + phase
        )
    return out


def _patch_index_grid(dims, patch_dims) -> np.ndarray:
    """Flat voxel index -> patch index under the patchify ordering."""
    h, w, d = dims
    ph, pw, pd = patch_dims
    gh, gw = h // ph, w // pw
    z, y, x = np.meshgrid(
        np.arange(d), np.arange(h), np.arange(w), indexing="ij"
    )
    return ((z // pd) * gh * gw + (y // ph) * gw + (x // pw)).reshape(-1)


def generate_sample(seed: int, cfg: GenConfig | None = None) -> SyntheticSample:
    """Deterministically build one paired (volume, report) sample."""
    cfg = cfg or GenConfig()
    h, w, d = cfg.dims
    if h % cfg.patch_dims[0] or w % cfg.patch_dims[1] or d % cfg.patch_dims[2]:
        raise ValueError(f"dims {cfg.dims} not divisible by patches {cfg.patch_dims}")
    rng = Rng(seed, GEN_STREAM)

    grid = _background(rng, cfg.dims)

    count = cfg.lesion_min + rng.below(cfg.lesion_max - cfg.lesion_min + 1)
    type_order = rng.permutation(len(cfg.types))
    lesions = []
    for t in type_order[:count]:
        lesions.append(_place_lesion(rng, cfg, cfg.types[int(t)], lesions))

    z, y, x = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    patch_of_voxel = _patch_index_grid(cfg.dims, cfg.patch_dims)

    sentences, truth_sets, masks, supports = [], [], [], []
    labels = np.zeros(len(cfg.types), dtype=np.int64)
    n_voxels = grid.size
    for lesion in lesions:
        cx, cy, cz = lesion["center"]
        rx, ry, rz = lesion["radii"]
        r2 = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
        bump = lesion["amp"] * np.maximum(0.0, 1.0 - r2)
        grid += bump
        voxel_mask = np.flatnonzero(bump.reshape(-1) >= cfg.mask_cut * lesion["amp"])
        if voxel_mask.size == 0 or voxel_mask.size > 0.1 * n_voxels:
            raise GenerationError(
                f"lesion '{lesion['type'].name}' footprint {voxel_mask.size} voxels "
                f"out of bounds for volume of {n_voxels}"
            )
        masks.append(voxel_mask)
        supports.append(np.flatnonzero(bump.reshape(-1) > 0.0))
        truth_sets.append(np.unique(patch_of_voxel[voxel_mask]))
        labels[cfg.type_names.index(lesion["type"].name)] = 1

        size_word = "small" if max(rx, ry) < 3.5 else "large"
        template = _SENTENCE_TEMPLATES[rng.below(len(_SENTENCE_TEMPLATES))]
        sentences.append(template.format(
            size=size_word,
            name=lesion["type"].name,
            octant=_octant_words(lesion["center"], cfg.dims),
        ))

    impression = " and ".join(l["type"].name for l in lesions) + " present."
    report = f"FINDINGS: {' '.join(sentences)} IMPRESSION: {impression}"

    volume = Volume(
        cfg.dims, cfg.spacing, grid.reshape(-1).astype(np.float32)
    )
    return SyntheticSample(volume, report, truth_sets, labels, masks, supports)


# ---------------------------------------------------------------------------
# on-disk corpus


@dataclass
class CorpusSample:
    sample_id: int
    volume: Volume
    report_text: str
    truth: list
    labels: np.ndarray


def generate_corpus(seed: int, n: int, cfg: GenConfig, out_dir) -> str:
    """Write n samples (seeds seed..seed+n-1) plus labels and manifest.

    Returns the manifest path. Layout per sample: sample_XXXX.svol,
    sample_XXXX.report.txt, sample_XXXX.truth.txt; one shared labels.csv
    row per sample; manifest.csv lists paths and the label matrix.
    """
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    os.makedirs(out_dir, exist_ok=True)
    names = cfg.type_names
    manifest_path = os.path.join(out_dir, "manifest.csv")
    labels_path = os.path.join(out_dir, "labels.csv")
    with open(manifest_path, "w", newline="") as mf, open(labels_path, "w", newline="") as lf:
        man = csv.writer(mf)
        lab = csv.writer(lf)
        man.writerow(["sample_id", "volume_path", "report_path", "truth_path"]
                     + [f"label_{t}" for t in names])
        lab.writerow(["sample_id"] + names)
        for i in range(n):
            sample = generate_sample(seed + i, cfg)
            stem = f"sample_{i:04d}"
            vol_name = f"{stem}.svol"
            rep_name = f"{stem}.report.txt"
            tru_name = f"{stem}.truth.txt"
            save_svol(sample.volume, os.path.join(out_dir, vol_name))
            with open(os.path.join(out_dir, rep_name), "w", encoding="utf-8") as fh:
                fh.write(sample.report_text + "\n")
            with open(os.path.join(out_dir, tru_name), "w", encoding="utf-8") as fh:
                for s_idx, patches in enumerate(sample.sentence_truth):
                    fh.write(f"{s_idx}: {','.join(str(p) for p in patches)}\n")
            man.writerow([i, vol_name, rep_name, tru_name] + sample.labels.tolist())
            lab.writerow([i] + sample.labels.tolist())
    return manifest_path


def load_corpus(data_dir) -> list:
    """Read every sample listed in manifest.csv back into memory."""
    manifest_path = os.path.join(data_dir, "manifest.csv")
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        label_cols = [c for c in reader.fieldnames if c.startswith("label_")]
        for row in reader:
            volume = load_svol(os.path.join(data_dir, row["volume_path"]))
            with open(os.path.join(data_dir, row["report_path"]), encoding="utf-8") as rf:
                report = rf.read().strip()
            truth = []
            with open(os.path.join(data_dir, row["truth_path"]), encoding="utf-8") as tf:
                for line in tf:
                    _, _, tail = line.partition(":")
                    ids = [int(p) for p in tail.strip().split(",") if p != ""]
                    truth.append(np.asarray(ids, dtype=np.int64))
            labels = np.asarray([int(row[c]) for c in label_cols], dtype=np.int64)
            samples.append(CorpusSample(int(row["sample_id"]), volume, report, truth, labels))
    return samples
