"""3D volume container, preprocessing, patch geometry and mask sampling.

Axis convention used throughout: a volume has dims (H, W, D) where W is
the x extent, H the y extent and D the z extent; spacing is (sx, sy, sz)
in mm per voxel along (x, y, z). The flat voxel buffer runs x fastest,
then y, then z, i.e. flat index = x + W*(y + H*z). `as_grid()` exposes
the same buffer as a (D, H, W) ndarray indexed [z, y, x].

Patches are ordered lexicographically by (grid_z, grid_y, grid_x) and
each patch is flattened x-fastest, matching the volume convention.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1

HU_MIN = -1000.0
HU_MAX = 1000.0


class GeometryError(ValueError):
    """Volume/patch dimensions do not fit together."""


class SvolFormatError(ValueError):
    """Malformed SVOL file."""


@dataclass
class Volume:
    dims: tuple          # (H, W, D)
    spacing: tuple       # (sx, sy, sz), mm per voxel
    voxels: np.ndarray   # flat, x fastest

    def __post_init__(self):
        h, w, d = self.dims
        if h * w * d != self.voxels.size:
            raise GeometryError(
                f"dims {self.dims} imply {h * w * d} voxels, buffer has {self.voxels.size}"
            )
        if any(s <= 0 for s in self.spacing):
            raise GeometryError(f"spacing must be positive, got {self.spacing}")

    def as_grid(self) -> np.ndarray:
        """View of the buffer as (D, H, W), indexed [z, y, x]."""
        h, w, d = self.dims
        return self.voxels.reshape(d, h, w)

    @classmethod
    def from_grid(cls, grid: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        d, h, w = grid.shape
        return cls((h, w, d), tuple(spacing), np.ascontiguousarray(grid).reshape(-1))


@dataclass
class PatchGrid:
    patch_dims: tuple    # (P_H, P_W, P_D)
    grid_dims: tuple     # (H/P_H, W/P_W, D/P_D)
    patches: np.ndarray  # (N_total, P_H*P_W*P_D)

    @property
    def n_total(self) -> int:
        gh, gw, gd = self.grid_dims
        return gh * gw * gd


@dataclass
class MaskPlan:
    """Partition of {0..n_total-1} into masked and unmasked index sets."""

    n_total: int
    ratio: float
    masked_idx: np.ndarray    # sorted
    unmasked_idx: np.ndarray  # sorted

    @classmethod
    def from_masked(cls, n_total: int, masked_idx) -> "MaskPlan":
        masked = np.asarray(masked_idx, dtype=np.int64)
        masked = np.sort(masked)
        keep = np.setdiff1d(np.arange(n_total, dtype=np.int64), masked)
        ratio = float(masked.size) / n_total if n_total else 0.0
        return cls(n_total, ratio, masked, keep)

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.size)

    @property
    def n_unmasked(self) -> int:
        return int(self.unmasked_idx.size)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def normalize_hu(vol: Volume) -> Volume:
    """Clamp Hounsfield values to [-1000, 1000] and scale into [-1, 1]."""
    bad = ~np.isfinite(vol.voxels)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(f"non-finite voxel at flat index {idx}")
    out = np.clip(vol.voxels, HU_MIN, HU_MAX) / HU_MAX
    return Volume(vol.dims, vol.spacing, out.astype(vol.voxels.dtype, copy=False))


def resample_trilinear(vol: Volume, target_spacing) -> Volume:
    """Resample onto a new spacing grid with trilinear interpolation.

    Output extent per axis is round(n * spacing / target); output index
    c maps to source coordinate c * (target / spacing), and coordinates
    beyond the source extent clamp to the edge voxel.
    """
    tx, ty, tz = target_spacing
    if tx <= 0 or ty <= 0 or tz <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    h, w, d = vol.dims
    sx, sy, sz = vol.spacing
    out_w = _round_half_up(w * sx / tx)
    out_h = _round_half_up(h * sy / ty)
    out_d = _round_half_up(d * sz / tz)
    if min(out_w, out_h, out_d) < 1:
        raise ValueError(
            f"resampling {vol.dims} at spacing {vol.spacing} to {tuple(target_spacing)} "
            f"yields empty dims ({out_h}, {out_w}, {out_d})"
        )

    grid = vol.as_grid()

    def axis_coords(n_out, n_src, ratio):
        c = np.arange(n_out, dtype=np.float64) * ratio
        c = np.clip(c, 0.0, n_src - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, c - lo

    z0, z1, fz = axis_coords(out_d, d, tz / sz)
    y0, y1, fy = axis_coords(out_h, h, ty / sy)
    x0, x1, fx = axis_coords(out_w, w, tx / sx)

    fz = fz[:, None, None]
    fy = fy[None, :, None]
    fx = fx[None, None, :]

    def corner(zi, yi, xi):
        return grid[zi[:, None, None], yi[None, :, None], xi[None, None, :]]

    out = (
        corner(z0, y0, x0) * (1 - fz) * (1 - fy) * (1 - fx)
        + corner(z0, y0, x1) * (1 - fz) * (1 - fy) * fx
        + corner(z0, y1, x0) * (1 - fz) * fy * (1 - fx)
        + corner(z0, y1, x1) * (1 - fz) * fy * fx
        + corner(z1, y0, x0) * fz * (1 - fy) * (1 - fx)
        + corner(z1, y0, x1) * fz * (1 - fy) * fx
        + corner(z1, y1, x0) * fz * fy * (1 - fx)
        + corner(z1, y1, x1) * fz * fy * fx
    )
    out = out.astype(vol.voxels.dtype, copy=False)
    return Volume.from_grid(out, tuple(float(t) for t in target_spacing))


def patchify(vol: Volume, patch_dims) -> PatchGrid:
    """Split a volume into non-overlapping patches.

    Dims must divide exactly; padding would silently change the patch
    count, so mismatches are a hard error.
    """
    ph, pw, pd = patch_dims
    h, w, d = vol.dims
    if h % ph or w % pw or d % pd:
        raise GeometryError(
            f"volume dims {vol.dims} not divisible by patch dims {tuple(patch_dims)}"
        )
    gh, gw, gd = h // ph, w // pw, d // pd
    grid = vol.as_grid()
    # (gz, pz, gy, py, gx, px) -> (gz, gy, gx, pz, py, px)
    parts = grid.reshape(gd, pd, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    patches = parts.reshape(gd * gh * gw, pd * ph * pw)
    return PatchGrid((ph, pw, pd), (gh, gw, gd), np.ascontiguousarray(patches))


def unpatchify(pg: PatchGrid, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Inverse of patchify; bit-exact round trip."""
    ph, pw, pd = pg.patch_dims
    gh, gw, gd = pg.grid_dims
    parts = pg.patches.reshape(gd, gh, gw, pd, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    grid = parts.reshape(gd * pd, gh * ph, gw * pw)
    return Volume.from_grid(np.ascontiguousarray(grid), spacing)


def sample_mask(n_total: int, ratio: float, rng: Rng) -> MaskPlan:
    """Uniform random mask over n_total items; round(ratio*n) are masked."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    n_masked = _round_half_up(ratio * n_total)
    perm = rng.permutation(n_total)
    masked = np.sort(perm[:n_masked])
    unmasked = np.sort(perm[n_masked:])
    return MaskPlan(n_total, ratio, masked, unmasked)


def _sincos_ladder(coords: np.ndarray, width: int) -> np.ndarray:
    """Standard sin/cos frequency ladder over one coordinate axis.

    First width//2 columns are sin(c / 10000^(j/p)), next width//2 are
    the matching cos; an odd trailing column stays zero.
    """
    pairs = width // 2
    out = np.zeros((coords.size, width), dtype=np.float64)
    if pairs == 0:
        return out
    j = np.arange(pairs, dtype=np.float64)
    div = np.power(10000.0, j / pairs)
    angles = coords[:, None] / div[None, :]
    out[:, :pairs] = np.sin(angles)
    out[:, pairs:2 * pairs] = np.cos(angles)
    return out


def positional_embedding_3d(grid_dims, embed_dim: int) -> np.ndarray:
    """Fixed sinusoidal embeddings for a 3D patch grid, (N_total, embed_dim).

    The embedding dim is split into three contiguous blocks (z, y, x
    order, sizes balanced to within one) and each block encodes only its
    own axis coordinate, so patches sharing a coordinate share that block.
    """
    if embed_dim < 6:
        raise ValueError(f"embed_dim must be >= 6, got {embed_dim}")
    gh, gw, gd = grid_dims
    base, rem = divmod(embed_dim, 3)
    widths = [base + (1 if i < rem else 0) for i in range(3)]

    zz, yy, xx = np.meshgrid(
        np.arange(gd, dtype=np.float64),
        np.arange(gh, dtype=np.float64),
        np.arange(gw, dtype=np.float64),
        indexing="ij",
    )
    blocks = [
        _sincos_ladder(zz.reshape(-1), widths[0]),
        _sincos_ladder(yy.reshape(-1), widths[1]),
        _sincos_ladder(xx.reshape(-1), widths[2]),
    ]
    return np.concatenate(blocks, axis=1)


def positional_embedding_1d(n_pos: int, embed_dim: int) -> np.ndarray:
    """Fixed sinusoidal embeddings for a token sequence, (n_pos, embed_dim)."""
    return _sincos_ladder(np.arange(n_pos, dtype=np.float64), embed_dim)


def save_svol(vol: Volume, path) -> None:
    """Write the SVOL container: magic, version, dtype code, dims, spacing, raw voxels."""
    h, w, d = vol.dims
    header = struct.pack(
        "<4sHHIIIfff", SVOL_MAGIC, SVOL_VERSION, 0, h, w, d, *[float(s) for s in vol.spacing]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(vol.voxels, dtype="<f4").tobytes())


def load_svol(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4sHHIIIfff")
    if len(raw) < head_size:
        raise SvolFormatError(f"{path}: truncated header")
    magic, version, dtype_code, h, w, d, sx, sy, sz = struct.unpack_from("<4sHHIIIfff", raw)
    if magic != SVOL_MAGIC:
        raise SvolFormatError(f"{path}: bad magic {magic!r}")
    if version != SVOL_VERSION:
        raise SvolFormatError(f"{path}: unsupported version {version}")
    if dtype_code != 0:
        raise SvolFormatError(f"{path}: unknown dtype code {dtype_code}")
    expected = h * w * d * 4
    body = raw[head_size:]
    if len(body) != expected:
        raise SvolFormatError(f"{path}: expected {expected} voxel bytes, found {len(body)}")
    voxels = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return Volume((h, w, d), (sx, sy, sz), voxels)
