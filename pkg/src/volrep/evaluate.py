"""Downstream evaluation: frozen-feature extraction, linear probing with
rank-based AUC, per-sentence similarity heatmaps, and the full-model
gradient fidelity check.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from .gradcheck import central_difference, max_rel_error
from .losses import top_k_select, total_loss
from .model import ModelConfig, VolumeReportModel, instance_feature
from .rng import Rng
from .tensor import Tensor, backward, no_grad, use_dtype
from .text import Vocab, build_report_bundle, split_report, split_sentences, tokenize, _TOKEN_RE
from .train import composite_loss, prepare_patches
from .volume import sample_mask

PROBE_STREAM = 3


@dataclass
class ProbeResult:
    per_label_auc: list     # np.nan where undefined (single-class split)
    macro_auc: float
    accuracy: float
    n_train: int
    n_test: int
    label_ratio: float

    def to_csv(self, path, label_names=None) -> None:
        names = label_names or [f"label_{i}" for i in range(len(self.per_label_auc))]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("macro_auc,accuracy,n_train,n_test,label_ratio,"
                     + ",".join(f"auc_{n}" for n in names) + "\n")
            aucs = ",".join(
                "undefined" if np.isnan(a) else f"{a:.6f}" for a in self.per_label_auc
            )
            fh.write(f"{self.macro_auc:.6f},{self.accuracy:.6f},{self.n_train},"
                     f"{self.n_test},{self.label_ratio},{aucs}\n")


@dataclass
class Heatmap:
    grid_dims: tuple       # (G_H, G_W, G_D)
    scores: np.ndarray     # per-patch similarity, length = grid size
    topk_idx: np.ndarray   # ascending patch indices


def extract_features(model: VolumeReportModel, volumes) -> np.ndarray:
    """Instance features from the full (unmasked) patch set of each volume.

    Remasking is deliberately disabled here regardless of the training
    ratio; the patch count is asserted against the full grid inside the
    pass.
    """
    cfg = model.cfg
    feats = np.zeros((len(volumes), cfg.embed_dim), dtype=np.float64)
    with no_grad():
        pos = Tensor(model.pos3d)
        for i, vol in enumerate(volumes):
            patches = prepare_patches(vol, cfg.patch_dims)
            if patches.shape != (cfg.n_patches, cfg.patch_voxels):
                raise ValueError(
                    f"volume {i}: geometry {patches.shape} does not match model "
                    f"({cfg.n_patches}, {cfg.patch_voxels})"
                )
            f_v = model.encode_vision(Tensor(patches), pos)
            assert f_v.shape[0] == cfg.n_patches
            feats[i] = instance_feature(f_v).data
    return feats


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties 1/2.

    Computed from average ranks, which is exactly the pair-counting
    definition (rank arithmetic stays in exact half-integers).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _fit_logistic(x: np.ndarray, y: np.ndarray, iters: int, lr: float):
    """Plain full-batch gradient descent on the logistic loss, zero init."""
    w = np.zeros(x.shape[1], dtype=np.float64)
    b = 0.0
    n = x.shape[0]
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * float(err.mean())
    return w, b


def linear_probe(features: np.ndarray, labels: np.ndarray, label_ratio: float,
                 seed: int, iters: int = 1000, lr: float = 0.1) -> ProbeResult:
    """Per-label logistic regression on frozen features.

    Deterministic 70/30 split by seeded shuffle; the training split is
    subsampled to label_ratio. A label with a single class in either
    split gets an undefined AUC and is excluded from the macro average.
    """
    if not 0.0 < label_ratio <= 1.0:
        raise ValueError(f"label_ratio must be in (0, 1], got {label_ratio}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = x.shape[0]
    perm = Rng(seed, PROBE_STREAM).permutation(n)
    n_train = int(np.floor(0.7 * n + 0.5))
    train_idx = perm[:n_train]
    test_idx = perm[n_train:]
    keep = max(1, int(np.floor(label_ratio * n_train + 0.5)))
    train_idx = train_idx[:keep]

    per_auc, correct, counted = [], 0, 0
    for t in range(y.shape[1]):
        y_tr, y_te = y[train_idx, t], y[test_idx, t]
        w, b = _fit_logistic(x[train_idx], y_tr, iters, lr)
        scores = x[test_idx] @ w + b
        pred = (scores >= 0.0).astype(np.float64)
        correct += int((pred == y_te).sum())
        counted += y_te.size
        if len(set(y_tr.tolist())) < 2 or len(set(y_te.tolist())) < 2:
            per_auc.append(float("nan"))
        else:
            per_auc.append(auc(scores, y_te))
    defined = [a for a in per_auc if not np.isnan(a)]
    macro = float(np.mean(defined)) if defined else float("nan")
    return ProbeResult(per_auc, macro, correct / counted, len(train_idx),
                       len(test_idx), label_ratio)


def similarity_heatmap(model: VolumeReportModel, volume, report_text: str,
                       vocab: Vocab, sentence_index: int, k: int) -> Heatmap:
    """Per-patch similarity of one findings sentence over the full volume."""
    findings, _ = split_report(report_text)
    sentences = split_sentences(findings)
    if not 0 <= sentence_index < len(sentences):
        raise IndexError(
            f"sentence index {sentence_index} out of range for {len(sentences)} sentences"
        )
    ids = tokenize(sentences[sentence_index], vocab, with_specials=True)
    with no_grad():
        patches = prepare_patches(volume, model.cfg.patch_dims)
        f_v = model.encode_vision(Tensor(patches), Tensor(model.pos3d))
        patch_embs = model.project_patches(f_v)
        sent = model.pool_sentence(model.encode_text(ids))
        scores = patch_embs.data @ sent.data
    # model grid_dims are (G_H, G_W, G_D)
    return Heatmap(model.cfg.grid_dims, scores, top_k_select(scores, k))


def heatmap_to_bytes(hm: Heatmap) -> np.ndarray:
    """Min-max scale scores to u8; a flat map renders all-zero."""
    lo, hi = float(hm.scores.min()), float(hm.scores.max())
    if hi > lo:
        return np.rint((hm.scores - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    return np.zeros(hm.scores.size, dtype=np.uint8)


def write_heatmap_pgm(hm: Heatmap, out_dir, stem: str) -> list:
    """One binary PGM (P5) per depth slice plus a top-K index list."""
    os.makedirs(out_dir, exist_ok=True)
    gh, gw, gd = hm.grid_dims
    levels = heatmap_to_bytes(hm).reshape(gd, gh, gw)
    paths = []
    for z in range(gd):
        path = os.path.join(out_dir, f"{stem}_z{z:02d}.pgm")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{gw} {gh}\n255\n".encode("ascii"))
            fh.write(levels[z].tobytes())
        paths.append(path)
    idx_path = os.path.join(out_dir, f"{stem}_topk.txt")
    with open(idx_path, "w", encoding="utf-8") as fh:
        for i in hm.topk_idx:
            fh.write(f"{int(i)}\n")
    paths.append(idx_path)
    return paths


def expected_random_overlap(n_total: int, truth_size: int, k_eff: int) -> float:
    """Mean |K-subset ∩ truth| for a uniformly random K-subset."""
    return k_eff * truth_size / n_total


# ---------------------------------------------------------------------------
# gradient fidelity


_CHECK_REPORT = (
    "FINDINGS: A small nodule is seen in the upper left anterior region. "
    "There is a large mass in the lower right posterior region. "
    "IMPRESSION: nodule and mass present."
)


def gradient_fidelity_check(seed: int = 0, tol: float = 1e-6) -> dict:
    """Compare every parameter gradient of the composite loss against
    central finite differences on a tiny 64-bit model.

    Returns {"max_rel_err": float, "per_param": {...}, "elapsed_s": float,
    "passed": bool}.
    """
    start = time.perf_counter()
    with use_dtype(np.float64):
        vocab = Vocab.from_words(_TOKEN_RE.findall(_CHECK_REPORT.lower()))
        mcfg = ModelConfig(
            embed_dim=16, proj_dim=8, enc_layers_v=1, dec_layers_v=1,
            enc_layers_t=1, dec_layers_t=1, heads=2, mlp_ratio=1,
            vocab_size=len(vocab), patch_dims=(2, 2, 2), grid_dims=(2, 2, 2),
        )
        model = VolumeReportModel(mcfg, Rng(seed, 11))
        data_rng = Rng(seed, 12)
        patches = (-1.0 + 2.0 * data_rng.uniform(mcfg.n_patches * mcfg.patch_voxels)
                   ).reshape(mcfg.n_patches, mcfg.patch_voxels)
        plan = sample_mask(mcfg.n_patches, 0.75, Rng(seed, 13))
        bundle = build_report_bundle(_CHECK_REPORT, vocab, 0.75, Rng(seed, 14))

        def loss_value() -> float:
            with no_grad():
                return _loss_tensor().item()

        def _loss_tensor():
            l_mim, l_align, l_mlm = composite_loss(
                model, patches, plan, bundle,
                top_k=2, tau=0.07, mim_scope="masked",
            )
            _, total = total_loss(l_mim, l_align, l_mlm)
            return total

        model.zero_grad()
        backward(_loss_tensor())

        per_param = {}
        worst = 0.0
        for name, p in model.named_params().items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = central_difference(loss_value, p.data)
            err = max_rel_error(analytic, numeric)
            per_param[name] = err
            worst = max(worst, err)

    elapsed = time.perf_counter() - start
    return {
        "max_rel_err": worst,
        "per_param": per_param,
        "elapsed_s": elapsed,
        "passed": worst < tol,
    }
