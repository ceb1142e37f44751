"""Magnitude pruning masks and sparsity/compression accounting.

A mask maps each prunable tensor name to a boolean array of the same shape,
True where the weight survives. Masks only ever shrink along a pruning
lineage: an existing mask passed to a pruning call stays masked.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MASK_MAGIC = b"RWLM"
MASK_VERSION = 1
_EPS = 1e-9


@dataclass(frozen=True)
class PruneMask:
    masks: dict[str, np.ndarray]
    target_sparsity: float = 0.0

    @classmethod
    def dense(cls, weights: Mapping[str, np.ndarray]) -> "PruneMask":
        return cls({k: np.ones(np.shape(v), dtype=bool) for k, v in weights.items()}, 0.0)

    @property
    def kernel_count(self) -> int:
        return sum(int(m.size) for m in self.masks.values())

    @property
    def nonzero_count(self) -> int:
        return sum(int(np.count_nonzero(m)) for m in self.masks.values())

    def sparsity(self) -> float:
        return sparsity_of(self)

    def compression(self) -> float:
        return compression_of(self).value

    def issubset(self, other: "PruneMask") -> bool:
        """True if every weight surviving here also survives in ``other``."""
        return all(not np.any(m & ~other.masks[k]) for k, m in self.masks.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.masks):
            h.update(k.encode())
            h.update(np.packbits(self.masks[k].reshape(-1)).tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, PruneMask) or self.masks.keys() != other.masks.keys():
            return False
        return all(np.array_equal(m, other.masks[k]) for k, m in self.masks.items())

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CompressionRatio:
    value: float

    @property
    def sparsity(self) -> float:
        return 1.0 - 1.0 / self.value


def compression_from_sparsity(s: float) -> float:
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    return 1.0 / (1.0 - s)


def sparsity_from_compression(c: float) -> float:
    if c < 1.0:
        raise ValueError(f"compression ratio must be >= 1, got {c}")
    return 1.0 - 1.0 / c


def sparsity_of(mask: PruneMask) -> float:
    total = mask.kernel_count
    if total == 0:
        raise ValueError("mask covers no weights")
    return 1.0 - mask.nonzero_count / total


def compression_of(mask: PruneMask) -> CompressionRatio:
    nz = mask.nonzero_count
    if nz == 0:
        raise ValueError("every weight is masked; compression ratio undefined")
    return CompressionRatio(mask.kernel_count / nz)


def iterative_sparsity(step_fraction: float, rounds: int) -> float:
    """Sparsity after ``rounds`` rounds that each remove ``step_fraction`` of the survivors."""
    if not 0.0 < step_fraction < 1.0:
        raise ValueError(f"step fraction must lie in (0, 1), got {step_fraction}")
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    return 1.0 - (1.0 - step_fraction) ** rounds


def _check_sparsity(s: float) -> None:
    if not 0.0 <= s < 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1), got {s}")


def _existing(weights: Mapping[str, np.ndarray], existing: PruneMask | None) -> dict[str, np.ndarray]:
    if existing is None:
        return {k: np.ones(np.shape(w), dtype=bool) for k, w in weights.items()}
    out = {}
    for k, w in weights.items():
        m = existing.masks.get(k)
        if m is None:
            m = np.ones(np.shape(w), dtype=bool)
        elif m.shape != np.shape(w):
            raise ValueError(f"mask for {k!r} has shape {m.shape}, tensor has {np.shape(w)}")
        out[k] = m
    return out


def _warn_empty(masks: Mapping[str, np.ndarray]) -> None:
    for k, m in masks.items():
        if m.size and not m.any():
            warnings.warn(f"pruning removed every weight of {k!r}", RuntimeWarning, stacklevel=3)


def prune_unstructured(weights: Mapping[str, np.ndarray], target_sparsity: float,
                       scope: str = "global", existing: PruneMask | None = None,
                       exempt: Iterable[str] = ()) -> PruneMask:
    """Mask the smallest-|w| entries.

    Global scope masks exactly floor(s * kernel_count) entries across all
    tensors; per-layer scope does the same within each tensor. Already masked
    entries are taken first; ties go to the lower (tensor index, flat
    position). Exempt tensors keep their existing mask and count toward the
    kernel total.
    """
    _check_sparsity(target_sparsity)
    if scope not in ("global", "per-layer"):
        raise ValueError(f"scope must be 'global' or 'per-layer', got {scope!r}")
    exempt = set(exempt)
    prev = _existing(weights, existing)
    names = list(weights)
    if scope == "per-layer":
        out = {}
        for k in names:
            if k in exempt:
                out[k] = prev[k].copy()
                continue
            out[k] = _prune_flat([np.abs(weights[k]).reshape(-1)], [prev[k].reshape(-1)],
                                 math.floor(target_sparsity * prev[k].size + _EPS))[0].reshape(prev[k].shape)
        _warn_empty(out)
        return PruneMask(out, target_sparsity)

    total = sum(prev[k].size for k in names)
    n_prune = math.floor(target_sparsity * total + _EPS)
    pool = [k for k in names if k not in exempt]
    fixed_masked = sum(int(prev[k].size - np.count_nonzero(prev[k])) for k in names if k in exempt)
    pool_size = sum(prev[k].size for k in pool)
    n_pool = n_prune - fixed_masked
    if n_pool > pool_size:
        raise ValueError(f"cannot reach sparsity {target_sparsity} with {sorted(exempt)} exempt")
    flat = _prune_flat([np.abs(weights[k]).reshape(-1) for k in pool],
                       [prev[k].reshape(-1) for k in pool], max(n_pool, 0))
    out = {k: prev[k].copy() for k in names if k in exempt}
    for k, m in zip(pool, flat):
        out[k] = m.reshape(prev[k].shape)
    out = {k: out[k] for k in names}
    _warn_empty(out)
    return PruneMask(out, target_sparsity)


def _prune_flat(mags: list[np.ndarray], alive: list[np.ndarray], n_prune: int) -> list[np.ndarray]:
    key = np.concatenate([np.where(a, m.astype(np.float64), -1.0) for m, a in zip(mags, alive)]) \
        if mags else np.zeros(0)
    keep = np.concatenate(alive) if alive else np.zeros(0, dtype=bool)
    already = int(keep.size - np.count_nonzero(keep))
    keep = keep.copy()
    if n_prune > already:
        order = np.argsort(key, kind="stable")
        keep[order[:n_prune]] = False
    out, start = [], 0
    for a in alive:
        out.append(keep[start:start + a.size])
        start += a.size
    return out


def structure_scores(w: np.ndarray) -> np.ndarray:
    """Mean |w| of each structure (slice along the leading/output axis)."""
    if w.ndim == 0 or w.shape[0] == 0 or w.size // max(w.shape[0], 1) == 0:
        raise ValueError(f"tensor of shape {w.shape} has empty structures")
    return np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)


def prune_structured(weights: Mapping[str, np.ndarray], target_sparsity: float,
                     existing: PruneMask | None = None, exempt: Iterable[str] = ()) -> PruneMask:
    """Mask whole rows / output channels ranked by mean |w|.

    Structures are removed in ascending order of mean magnitude (ties by
    tensor then structure index) until at least ``s * kernel_count`` weights
    are masked. Structures that are already fully masked go first.
    """
    _check_sparsity(target_sparsity)
    exempt = set(exempt)
    prev = _existing(weights, existing)
    names = list(weights)
    total = sum(prev[k].size for k in names)
    need = target_sparsity * total - _EPS
    out = {k: prev[k].copy() for k in names}
    masked = sum(int(m.size - np.count_nonzero(m)) for m in out.values())
    cands = []
    for ti, k in enumerate(names):
        if k in exempt:
            continue
        scores = structure_scores(np.asarray(weights[k]))
        rows_alive = out[k].reshape(out[k].shape[0], -1).any(axis=1)
        for si, sc in enumerate(scores):
            cands.append((0 if not rows_alive[si] else 1, float(sc) if rows_alive[si] else 0.0, ti, si))
    cands.sort()
    for _, _, ti, si in cands:
        if masked >= need:
            break
        k = names[ti]
        row = out[k][si]
        masked += int(np.count_nonzero(row))
        row[...] = False
    if masked < need:
        raise ValueError(f"cannot reach structured sparsity {target_sparsity}")
    _warn_empty(out)
    return PruneMask(out, target_sparsity)


def apply_mask(weights: Mapping[str, np.ndarray], mask: PruneMask) -> dict[str, np.ndarray]:
    """Copy of ``weights`` with masked entries set to +0.0; other tensors passed through."""
    out = dict(weights)
    for k, m in mask.masks.items():
        w = np.asarray(weights[k])
        if w.shape != m.shape:
            raise ValueError(f"mask for {k!r} has shape {m.shape}, tensor has {w.shape}")
        out[k] = np.where(m, w, np.zeros((), dtype=w.dtype))
    return out


def apply_mask_(weights: dict[str, np.ndarray], mask: PruneMask) -> None:
    """In-place variant of :func:`apply_mask`."""
    for k, m in mask.masks.items():
        np.copyto(weights[k], 0.0, where=~m)


# ------------------------------------------------------------------ file I/O

def save_mask(path: str | os.PathLike, mask: PruneMask) -> None:
    """Write the RWLM container atomically.

    Layout (little-endian): b"RWLM", u8 version, f64 target sparsity, u32
    tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
    rank x u32 dims, ceil(n/8) bytes of bits packed LSB-first.
    """
    parts = [MASK_MAGIC, struct.pack("<BdI", MASK_VERSION, mask.target_sparsity, len(mask.masks))]
    for name, m in mask.masks.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", m.ndim) + struct.pack(f"<{m.ndim}I", *m.shape))
        parts.append(np.packbits(m.reshape(-1).astype(bool), bitorder="little").tobytes())
    _atomic_write(Path(path), b"".join(parts))


def load_mask(path: str | os.PathLike) -> PruneMask:
    buf = Path(path).read_bytes()
    if buf[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file (magic {buf[:4]!r})")
    version, target, count = struct.unpack_from("<BdI", buf, 4)
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {version}")
    off = 4 + struct.calcsize("<BdI")
    masks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        if off + nbytes > len(buf):
            raise ValueError(f"{path}: truncated at byte {off} reading {name!r}")
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=size, bitorder="little")
        masks[name] = bits.astype(bool).reshape(shape)
        off += nbytes
    return PruneMask(masks, target)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
