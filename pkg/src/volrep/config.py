"""Run configuration: flat key=value files with CLI overrides.

The config file format is UTF-8 lines of `key=value`; blank lines and
lines starting with '#' are ignored. Unknown keys are rejected so typos
fail loudly. CLI `--key=value` arguments override file values.

The architecture fingerprint hashes only the keys that determine
whether checkpoint weights are loadable (geometry, model sizes, vocab,
dtype), so resuming with a different step count or learning rate is
allowed while loading into a mismatched model is not.
"""

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Bad config key or value."""


@dataclass
class Config:
    # run
    seed: int = 0
    dtype: str = "f32"
    out_dir: str = "out"
    data_dir: str = ""
    checkpoint: str = ""
    ckpt_out: str = ""
    resume: str = ""
    save_every: int = 0
    vocab: str = ""              # vocab file path; empty = built-in corpus vocab
    # data generation
    n: int = 256
    vol_h: int = 32
    vol_w: int = 32
    vol_d: int = 16
    spacing_x: float = 1.0
    spacing_y: float = 1.0
    spacing_z: float = 1.0
    lesion_min: int = 1
    lesion_max: int = 4
    # model
    embed_dim: int = 64
    proj_dim: int = 32
    enc_layers_v: int = 2
    dec_layers_v: int = 1
    enc_layers_t: int = 2
    dec_layers_t: int = 1
    heads: int = 4
    mlp_ratio: int = 4
    patch_h: int = 8
    patch_w: int = 8
    patch_d: int = 4
    sentence_pool: str = "cls"
    # masking
    mask_ratio: float = 0.75
    report_mask_ratio: float = 0.75
    bert_masking: bool = False
    # objectives
    top_k: int = 4
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    enable_mim: bool = True
    enable_mlm: bool = True
    enable_sa: bool = True
    enable_il: bool = True
    enable_wl: bool = True
    mim_scope: str = "masked"
    freeze_text_encoder: bool = False
    # optimizer
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 8
    steps: int = 500
    # linear probe
    label_ratio: float = 1.0
    probe_iters: int = 1000
    probe_lr: float = 0.1
    # visualization
    sample_id: int = 0
    sentence_index: int = 0

    @property
    def vol_dims(self) -> tuple:
        return (self.vol_h, self.vol_w, self.vol_d)

    @property
    def patch_dims(self) -> tuple:
        return (self.patch_h, self.patch_w, self.patch_d)

    @property
    def grid_dims(self) -> tuple:
        if (self.vol_h % self.patch_h or self.vol_w % self.patch_w
                or self.vol_d % self.patch_d):
            raise ConfigError(
                f"volume dims {self.vol_dims} not divisible by patch dims {self.patch_dims}"
            )
        return (self.vol_h // self.patch_h, self.vol_w // self.patch_w,
                self.vol_d // self.patch_d)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}

# keys that must match between a checkpoint and the model loading it
ARCH_KEYS = (
    "dtype", "vol_h", "vol_w", "vol_d", "patch_h", "patch_w", "patch_d",
    "embed_dim", "proj_dim", "enc_layers_v", "dec_layers_v", "enc_layers_t",
    "dec_layers_t", "heads", "mlp_ratio", "sentence_pool",
)


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from None


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            values[key] = _coerce(key, raw)
    return values


def apply_overrides(values: dict, overrides) -> dict:
    """Apply 'key=value' strings (from --key=value CLI flags)."""
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, _, raw = item.partition("=")
        if key not in _FIELDS:
            raise ConfigError(f"unknown key '{key}'")
        out[key] = _coerce(key, raw)
    return out


def build_config(path=None, overrides=()) -> Config:
    values = parse_config_file(path) if path else {}
    values = apply_overrides(values, overrides)
    cfg = Config(**values)
    if cfg.dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {cfg.dtype!r}")
    return cfg


def arch_fingerprint(cfg: Config, vocab_size: int) -> bytes:
    """32-byte digest of every architecture-determining key."""
    parts = [f"{k}={getattr(cfg, k)}" for k in ARCH_KEYS]
    parts.append(f"vocab_size={vocab_size}")
    return hashlib.sha256("\n".join(parts).encode()).digest()
