"""Optimizer, end-to-end training step, and checkpointing.

One training step per sample: mask volume patches, encode the visible
ones, reconstruct the full volume (masked-patch MSE); mask report
tokens, encode, fuse instance-level and word-patch vision context,
decode (masked-token cross-entropy); encode and pool each findings
sentence, pick its top-K most similar patch embeddings, and pull the
pooled sub-region toward the sentence (symmetric InfoNCE). Losses are
averaged over the batch, gradients flow once, AdamW updates.

Draw order from the single training stream is fixed and documented:
batch indices first, then per sample (in batch order) the patch mask
followed by the token mask. Checkpoints capture parameters, optimizer
moments, the stream state, and the step counter, so a resumed run is
bit-identical to an uninterrupted one.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import Config, arch_fingerprint
from .losses import (
    LossReport, align_loss, aligned_feature, mim_loss, mlm_loss,
    sentence_patch_similarity, top_k_select, total_loss,
)
from .model import ModelConfig, VolumeReportModel, instance_feature
from .rng import Rng
from .tensor import Tensor, NumericError, concat_rows, get_default_dtype, reshape
from .text import Vocab, build_report_bundle
from .volume import Volume, normalize_hu, patchify, sample_mask

INIT_STREAM = 1
TRAIN_STREAM = 2

CKPT_MAGIC = b"SCRP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    code = "corrupt"


class CheckpointMagicError(CheckpointError):
    code = "magic"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointConfigError(CheckpointError):
    code = "fingerprint"


@dataclass
class OptimState:
    t: int
    lr: float
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    m: dict
    v: dict


def init_optim_state(params: dict, trainable, cfg: Config) -> OptimState:
    m = {n: np.zeros_like(params[n].data) for n in trainable}
    v = {n: np.zeros_like(params[n].data) for n in trainable}
    return OptimState(0, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, m, v)


def adamw_step(params: dict, state: OptimState, lr_now: float | None = None) -> None:
    """Decoupled weight decay first, then the bias-corrected moment update."""
    lr = state.lr if lr_now is None else lr_now
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, m in state.m.items():
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"adamw[{name}]")
        p.data = p.data * (1.0 - lr * state.weight_decay)
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        state.v[name][...] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(params: dict, names, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for n in names:
            g = params[n].grad
            if g is not None:
                params[n].grad = g * scale
    return norm


def schedule_lr(cfg: Config, step: int) -> float:
    """Effective learning rate at a 1-based step index."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.lr_schedule == "cosine":
        span = max(1, cfg.steps - cfg.warmup_steps)
        done = min(span, step - cfg.warmup_steps)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * done / span))
    return cfg.lr


def prepare_patches(volume: Volume, patch_dims) -> np.ndarray:
    """HU-normalize and patchify one volume for the model."""
    return patchify(normalize_hu(volume), patch_dims).patches.astype(
        get_default_dtype(), copy=False
    )


def composite_loss(model: VolumeReportModel, patches: np.ndarray, plan, bundle,
                   *, top_k: int, tau: float, mim_scope: str,
                   enable_mim: bool = True, enable_mlm: bool = True,
                   enable_sa: bool = True, enable_il: bool = True,
                   enable_wl: bool = True):
    """Per-sample loss components as Tensors (disabled paths yield 0)."""
    zero = Tensor(0.0)
    pos_full = Tensor(model.pos3d)
    vis_in = Tensor(patches[plan.unmasked_idx])
    pos_vis = Tensor(model.pos3d[plan.unmasked_idx])
    f_v = model.encode_vision(vis_in, pos_vis)

    l_mim = zero
    if enable_mim:
        recon = model.decode_vision(f_v, plan, pos_full)
        l_mim = mim_loss(recon, Tensor(patches), plan, mim_scope)

    l_mlm = zero
    if enable_mlm and bundle.token_mask.n_masked > 0:
        f_t = model.encode_text(bundle.input_ids)
        f_inst = instance_feature(f_v) if enable_il else None
        f_word = model.cross_attention(f_t, f_v) if enable_wl else None
        logits = model.decode_text(f_t, f_inst, f_word)
        l_mlm = mlm_loss(logits, bundle.target_ids, bundle.token_mask)

    l_align = zero
    if enable_sa and bundle.sentences:
        d_s = model.cfg.proj_dim
        pooled = [
            reshape(model.pool_sentence(model.encode_text(ids)), (1, d_s))
            for ids in bundle.sentences
        ]
        f_sent = pooled[0] if len(pooled) == 1 else concat_rows(pooled)
        patch_embs = model.project_patches(f_v)
        sims = sentence_patch_similarity(f_sent, patch_embs)
        chosen = [
            reshape(aligned_feature(patch_embs, top_k_select(sims.data[i], top_k)), (1, d_s))
            for i in range(len(pooled))
        ]
        f_align = chosen[0] if len(chosen) == 1 else concat_rows(chosen)
        l_align = align_loss(f_align, f_sent, tau)

    return l_mim, l_align, l_mlm


class Trainer:
    """Owns the model, optimizer state and the training random stream."""

    def __init__(self, cfg: Config, corpus, vocab: Vocab):
        self.cfg = cfg
        self.vocab = vocab
        mcfg = ModelConfig(
            embed_dim=cfg.embed_dim, proj_dim=cfg.proj_dim,
            enc_layers_v=cfg.enc_layers_v, dec_layers_v=cfg.dec_layers_v,
            enc_layers_t=cfg.enc_layers_t, dec_layers_t=cfg.dec_layers_t,
            heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, vocab_size=len(vocab),
            patch_dims=cfg.patch_dims, grid_dims=cfg.grid_dims,
            enable_sa=cfg.enable_sa, enable_il=cfg.enable_il, enable_wl=cfg.enable_wl,
            freeze_text_encoder=cfg.freeze_text_encoder, mim_scope=cfg.mim_scope,
            sentence_pool=cfg.sentence_pool,
        )
        self.model = VolumeReportModel(mcfg, Rng(cfg.seed, INIT_STREAM))
        self.params = self.model.named_params()
        frozen = self.model.text_encoder_param_names() if cfg.freeze_text_encoder else set()
        for name in frozen:
            self.params[name].requires_grad = False
        self.trainable = [n for n in self.params if n not in frozen]
        self.opt = init_optim_state(self.params, self.trainable, cfg)
        self.rng = Rng(cfg.seed, TRAIN_STREAM)
        self.step = 0
        self.prepared = [
            {"patches": prepare_patches(s.volume, cfg.patch_dims), "report": s.report_text}
            for s in corpus
        ]
        for prep in self.prepared:
            if prep["patches"].shape != (mcfg.n_patches, mcfg.patch_voxels):
                raise ValueError(
                    f"corpus geometry {prep['patches'].shape} does not match config "
                    f"({mcfg.n_patches}, {mcfg.patch_voxels})"
                )

    def train_step(self) -> "LossReport":
        cfg = self.cfg
        self.step += 1
        batch = [self.rng.below(len(self.prepared)) for _ in range(cfg.batch_size)]
        self.model.zero_grad()

        totals, mims, aligns, mlms = None, 0.0, 0.0, 0.0
        for idx in batch:
            prep = self.prepared[idx]
            plan = sample_mask(self.model.cfg.n_patches, cfg.mask_ratio, self.rng)
            bundle = build_report_bundle(
                prep["report"], self.vocab, cfg.report_mask_ratio, self.rng,
                cfg.bert_masking,
            )
            l_mim, l_align, l_mlm = composite_loss(
                self.model, prep["patches"], plan, bundle,
                top_k=cfg.top_k, tau=cfg.tau, mim_scope=cfg.mim_scope,
                enable_mim=cfg.enable_mim, enable_mlm=cfg.enable_mlm,
                enable_sa=cfg.enable_sa, enable_il=cfg.enable_il,
                enable_wl=cfg.enable_wl,
            )
            _, sample_total = total_loss(
                l_mim, l_align, l_mlm, cfg.lambda1, cfg.lambda2,
                enable_sa=cfg.enable_sa, step=self.step,
            )
            totals = sample_total if totals is None else totals + sample_total
            mims += l_mim.item()
            aligns += l_align.item() if cfg.enable_sa else 0.0
            mlms += l_mlm.item()

        batch_total = totals * (1.0 / len(batch))
        batch_total.backward()
        if cfg.grad_clip > 0:
            clip_gradients(self.params, self.trainable, cfg.grad_clip)
        adamw_step(self.params, self.opt, schedule_lr(cfg, self.step))

        b = len(batch)
        l_mim, l_align, l_mlm = mims / b, aligns / b, mlms / b
        return LossReport(
            step=self.step, l_mim=l_mim, l_align=l_align, l_mlm=l_mlm,
            l_total=l_mim + cfg.lambda1 * l_align + cfg.lambda2 * l_mlm,
            lambda1=cfg.lambda1, lambda2=cfg.lambda2,
        )

    def run(self, csv_path=None, ckpt_out=None, save_every: int = 0,
            print_fn=None) -> list:
        """Train to cfg.steps, logging one CSV row per step."""
        reports = []
        csv_fh = None
        if csv_path:
            os.makedirs(os.path.dirname(csv_path) or ".", exist_ok=True)
            csv_fh = open(csv_path, "w", encoding="utf-8")
            csv_fh.write(LossReport.CSV_HEADER + "\n")
        try:
            while self.step < self.cfg.steps:
                report = self.train_step()
                reports.append(report)
                if csv_fh:
                    csv_fh.write(report.csv_row() + "\n")
                if print_fn and (self.step % 50 == 0 or self.step == 1):
                    print_fn(f"step {report.step}: total={report.l_total:.4f} "
                             f"mim={report.l_mim:.4f} align={report.l_align:.4f} "
                             f"mlm={report.l_mlm:.4f}")
                if ckpt_out and save_every and self.step % save_every == 0 \
                        and self.step < self.cfg.steps:
                    self.save(f"{ckpt_out}.step{self.step:06d}")
            if ckpt_out:
                self.save(ckpt_out)
        finally:
            if csv_fh:
                csv_fh.close()
        return reports

    # ------------------------------------------------------------------
    # checkpointing

    def save(self, path) -> None:
        fingerprint = arch_fingerprint(self.cfg, len(self.vocab))
        save_checkpoint(
            path, params=self.params, opt=self.opt, rng=self.rng,
            step=self.step, fingerprint=fingerprint,
            dtype_code=1 if self.cfg.dtype == "f64" else 0,
        )

    def load(self, path) -> None:
        """Restore parameters, optimizer, stream state and step counter."""
        ckpt = load_checkpoint(path)
        expected = arch_fingerprint(self.cfg, len(self.vocab))
        if ckpt.fingerprint != expected:
            raise CheckpointConfigError(
                f"{path}: checkpoint config fingerprint does not match this run"
            )
        for name, arr in ckpt.params.items():
            if name not in self.params:
                raise CheckpointError(f"{path}: unknown parameter '{name}'")
            self.params[name].data = arr.astype(self.params[name].data.dtype)
        self.opt.t = ckpt.opt_t
        self.opt.lr = ckpt.opt_hyper[0]
        self.opt.weight_decay = ckpt.opt_hyper[1]
        self.opt.beta1 = ckpt.opt_hyper[2]
        self.opt.beta2 = ckpt.opt_hyper[3]
        self.opt.eps = ckpt.opt_hyper[4]
        for name in self.opt.m:
            self.opt.m[name] = ckpt.opt_m[name].astype(self.opt.m[name].dtype)
            self.opt.v[name] = ckpt.opt_v[name].astype(self.opt.v[name].dtype)
        self.rng = Rng.restore(*ckpt.rng_state)
        self.step = ckpt.step


@dataclass
class Checkpoint:
    version: int
    dtype_code: int
    step: int
    fingerprint: bytes
    rng_state: tuple
    params: dict
    opt_t: int
    opt_hyper: tuple
    opt_m: dict
    opt_v: dict


def _write_tensor(fh, name: str, arr: np.ndarray, dtype) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated (wanted {n} bytes, got {len(data)})")
    return data


def _read_tensor(fh, path, dtype) -> tuple:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
    name = _read_exact(fh, name_len, path).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(fh, count * np.dtype(dtype).itemsize, path)
    return name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, *, params: dict, opt: OptimState, rng: Rng,
                    step: int, fingerprint: bytes, dtype_code: int) -> None:
    dtype = "<f8" if dtype_code == 1 else "<f4"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHQ", CKPT_MAGIC, CKPT_VERSION, dtype_code, step))
        fh.write(fingerprint)
        fh.write(struct.pack("<QQQ", *rng.state()))
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            _write_tensor(fh, name, p.data, dtype)
        fh.write(struct.pack("<Q", opt.t))
        fh.write(struct.pack("<5d", opt.lr, opt.weight_decay, opt.beta1,
                             opt.beta2, opt.eps))
        fh.write(struct.pack("<I", len(opt.m)))
        for name in opt.m:
            _write_tensor(fh, name, opt.m[name], dtype)
            _write_tensor(fh, name, opt.v[name], dtype)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic, version, dtype_code, step = struct.unpack(
            "<4sHHQ", _read_exact(fh, 16, path)
        )
        if magic != CKPT_MAGIC:
            raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"{path}: unsupported version {version}")
        fingerprint = _read_exact(fh, 32, path)
        rng_state = struct.unpack("<QQQ", _read_exact(fh, 24, path))
        dtype = "<f8" if dtype_code == 1 else "<f4"
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, path))
        params = {}
        for _ in range(n_params):
            name, arr = _read_tensor(fh, path, dtype)
            params[name] = arr
        (opt_t,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        opt_hyper = struct.unpack("<5d", _read_exact(fh, 40, path))
        (n_opt,) = struct.unpack("<I", _read_exact(fh, 4, path))
        opt_m, opt_v = {}, {}
        for _ in range(n_opt):
            name, arr = _read_tensor(fh, path, dtype)
            opt_m[name] = arr
            name_v, arr_v = _read_tensor(fh, path, dtype)
            if name_v != name:
                raise CheckpointError(f"{path}: optimizer m/v name mismatch")
            opt_v[name] = arr_v
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return Checkpoint(version, dtype_code, step, fingerprint, rng_state,
                      params, opt_t, opt_hyper, opt_m, opt_v)


def build_model_for_eval(cfg: Config, vocab: Vocab, ckpt_path) -> VolumeReportModel:
    """Rebuild a model from config and load checkpoint weights into it."""
    trainer = Trainer(cfg, corpus=[], vocab=vocab)
    trainer.load(ckpt_path)
    return trainer.model
