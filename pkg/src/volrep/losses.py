"""Loss functions: masked reconstruction, sentence-patch alignment with
top-K sub-region selection, masked token prediction, and their weighted
composite.

All losses take and return Tensors so gradients flow; top-K selection
itself operates on raw values and is treated as a constant index choice
by the backward pass (the correct subgradient for an argmax-style
selection).
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gather_rows, log_softmax, matmul, transpose, tsum
from .model import normalize_rows
from .volume import MaskPlan

DEFAULT_TAU = 0.07
DEFAULT_TOP_K = 64  # sized for full-scale geometry; desk configs override


def mim_loss(recon, target, plan: MaskPlan, scope: str = "masked"):
    """Mean squared reconstruction error over patch voxels.

    scope="masked" averages over masked patches only (visible patches
    are trivially reconstructable and dilute the signal); scope="full"
    averages over every patch.
    """
    if recon.shape != target.shape:
        raise ValueError(f"recon shape {recon.shape} != target shape {target.shape}")
    if scope == "masked":
        if plan.n_masked == 0:
            raise ValueError("mim_loss with scope='masked' needs a non-empty masked set")
        recon = gather_rows(recon, plan.masked_idx)
        target = gather_rows(target, plan.masked_idx)
    elif scope != "full":
        raise ValueError(f"unknown mim scope {scope!r}")
    diff = recon - target
    return (diff * diff).mean()


def sentence_patch_similarity(sentence_embs, patch_embs):
    """Pairwise dot products: (N_sent, d) x (N, d) -> (N_sent, N)."""
    return matmul(sentence_embs, transpose(patch_embs))


def top_k_select(sim_row, k: int) -> np.ndarray:
    """Indices of the min(k, N) largest values, ties to the smaller index,
    returned in ascending index order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    row = sim_row.data if isinstance(sim_row, Tensor) else np.asarray(sim_row)
    k_eff = min(k, row.size)
    # stable sort on negated values keeps earlier indices first among ties
    ranked = np.argsort(-row, kind="stable")[:k_eff]
    return np.sort(ranked)


def aligned_feature(patch_embs, topk_idx):
    """Mean of the selected patch rows, re-normalized to unit length."""
    topk_idx = np.asarray(topk_idx, dtype=np.int64)
    if topk_idx.size == 0:
        raise ValueError("aligned_feature needs a non-empty selection")
    pooled = gather_rows(patch_embs, topk_idx).mean(axis=0, keepdims=True)
    return normalize_rows(pooled).reshape((patch_embs.shape[1],))


def align_loss(f_align, f_sent, tau: float = DEFAULT_TAU):
    """Symmetric InfoNCE over matched (sub-region, sentence) rows.

    Negatives are the other sentences of the same report; both softmax
    directions (vision->text and text->vision) contribute.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = f_align.shape[0]
    if n < 1:
        raise ValueError("align_loss needs at least one sentence")
    if f_sent.shape != f_align.shape:
        raise ValueError(f"row stacks disagree: {f_align.shape} vs {f_sent.shape}")
    scaled = matmul(f_align, transpose(f_sent)) * (1.0 / tau)
    eye = Tensor(np.eye(n), dtype=scaled.data.dtype)
    matched = tsum(log_softmax(scaled) * eye) + tsum(log_softmax(transpose(scaled)) * eye)
    return -(matched * (1.0 / n))


def mlm_loss(logits, target_ids, plan: MaskPlan):
    """Mean negative log-likelihood of the original ids at masked positions."""
    if plan.n_masked == 0:
        raise ValueError("mlm_loss needs a non-empty masked set")
    n_rows, n_vocab = logits.shape
    onehot = np.zeros((n_rows, n_vocab), dtype=logits.data.dtype)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    onehot[plan.masked_idx, target_ids[plan.masked_idx]] = 1.0
    picked = tsum(log_softmax(logits) * Tensor(onehot, dtype=logits.data.dtype))
    return -(picked * (1.0 / plan.n_masked))


@dataclass
class LossReport:
    """Per-step loss components; l_total always equals
    l_mim + lambda1*l_align + lambda2*l_mlm in that accumulation order."""

    step: int
    l_mim: float
    l_align: float
    l_mlm: float
    l_total: float
    lambda1: float
    lambda2: float

    CSV_HEADER = "step,l_mim,l_align,l_mlm,l_total"

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.l_mim:.8g},{self.l_align:.8g},"
            f"{self.l_mlm:.8g},{self.l_total:.8g}"
        )


def total_loss(l_mim, l_align, l_mlm, lambda1: float = 1.0, lambda2: float = 1.0,
               enable_sa: bool = True, step: int = 0):
    """Combine components into the composite objective.

    Returns (LossReport, scalar Tensor for backward). With enable_sa
    off, the alignment term is replaced by an exact zero. Any non-finite
    component is an error naming the component.
    """
    zero = Tensor(0.0)
    l_mim = l_mim if isinstance(l_mim, Tensor) else Tensor(float(l_mim))
    l_mlm = l_mlm if isinstance(l_mlm, Tensor) else Tensor(float(l_mlm))
    if not enable_sa:
        l_align = zero
    else:
        l_align = l_align if isinstance(l_align, Tensor) else Tensor(float(l_align))
    for name, comp in (("l_mim", l_mim), ("l_align", l_align), ("l_mlm", l_mlm)):
        if not math.isfinite(comp.item()):
            raise ArithmeticError(f"non-finite loss component {name}")
    total = l_mim + lambda1 * l_align + lambda2 * l_mlm
    report = LossReport(
        step=step,
        l_mim=l_mim.item(),
        l_align=l_align.item(),
        l_mlm=l_mlm.item(),
        l_total=l_mim.item() + lambda1 * l_align.item() + lambda2 * l_mlm.item(),
        lambda1=lambda1,
        lambda2=lambda2,
    )
    return report, total
