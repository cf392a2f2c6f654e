"""Signed distance transforms and the two spatial priors of the fusion model.

Conventions
-----------
* Distances are measured between voxel centers, in mm, honoring spacing.
* ``D < 0`` inside the label's support: magnitude is the distance to the
  nearest voxel *not* carrying the label.  Outside, ``D > 0`` is the distance
  to the nearest voxel carrying it.  Values are clipped to ``[-d_max, d_max]``.
* The logOdds prior uses the logit ``-rho * D`` so that the atlas's own label
  is the most probable one near its support.
* The Potts coupling counts every unordered 6-neighbor pair once, so the
  mean-field message to voxel ``x`` is ``beta * sum_{y ~ x} q_y(n)``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .volume import GridMeta, LabelVolume, ScalarVolume, read_volume, write_volume

log = logging.getLogger(__name__)

DEFAULT_D_MAX = 20.0
CACHE_ENV = "FUSELAGE_CACHE"

# 6-connectivity offsets
NEIGHBOR_OFFSETS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


@dataclass(frozen=True)
class MrfConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class LogOddsConfig:
    rho: float = 1.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def _offset_distance(offsets: np.ndarray, spacing) -> np.ndarray:
    """Euclidean length of integer voxel offsets ``(..., 3)``, in mm.

    Shared by the fast transform and the brute-force oracle so both produce
    bit-identical values for the same nearest voxel.
    """
    sx, sy, sz = spacing
    d = offsets.astype(np.float64)
    return np.sqrt((d[..., 0] * sx) ** 2 + (d[..., 1] * sy) ** 2 + (d[..., 2] * sz) ** 2)


def _nearest_distance(target: np.ndarray, spacing) -> np.ndarray:
    """Distance from every voxel to the nearest voxel where ``target`` is True."""
    _, idx = ndimage.distance_transform_edt(~target, sampling=spacing, return_indices=True)
    grid = np.indices(target.shape)
    offsets = np.moveaxis(grid - idx, 0, -1)
    return _offset_distance(offsets, spacing)


def signed_edt(
    labels: LabelVolume,
    label_id: int,
    meta: GridMeta | None = None,
    d_max: float = DEFAULT_D_MAX,
) -> ScalarVolume:
    """Exact signed Euclidean distance transform of one label, clipped to ``±d_max``.

    An absent label yields ``+d_max`` everywhere and a whole-volume label
    ``-d_max`` everywhere.  Use :func:`label_present` to tell the former apart.
    """
    meta = meta or labels.meta
    obj = labels.data == label_id
    if not obj.any():
        log.debug("label %d absent; distance field saturated at +%g", label_id, d_max)
        return ScalarVolume(meta, np.full(meta.dims, float(d_max)))
    if obj.all():
        return ScalarVolume(meta, np.full(meta.dims, -float(d_max)))
    out = np.where(obj, -_nearest_distance(~obj, meta.spacing), _nearest_distance(obj, meta.spacing))
    return ScalarVolume(meta, np.clip(out, -d_max, d_max))


def label_present(labels: LabelVolume, label_id: int) -> bool:
    return bool((labels.data == label_id).any())


# ----------------------------------------------------------------------------
# Voxel domain (Omega) and its neighbor graph
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Domain:
    """Voxels of the brain mask with their 6-neighborhood inside the mask.

    ``coords`` are (V, 3) voxel indices in x-fastest linear order;
    ``neighbors`` is (V, 6) with ``-1`` for a neighbor outside the mask or
    grid; ``color`` is the checkerboard parity ``(i + j + k) % 2``.
    """

    meta: GridMeta
    mask: np.ndarray
    coords: np.ndarray = field(init=False)
    neighbors: np.ndarray = field(init=False)
    color: np.ndarray = field(init=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.meta.dims:
            raise ValueError("mask shape does not match grid")
        # x-fastest order: iterate k, then j, then i
        kk, jj, ii = np.nonzero(mask.transpose(2, 1, 0))
        coords = np.stack([ii, jj, kk], axis=1).astype(np.intp)
        index = np.full(mask.shape, -1, dtype=np.intp)
        index[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(len(coords))
        nbrs = np.full((len(coords), 6), -1, dtype=np.intp)
        dims = np.array(mask.shape)
        for c, off in enumerate(NEIGHBOR_OFFSETS):
            p = coords + np.array(off)
            ok = np.all((p >= 0) & (p < dims), axis=1)
            nbrs[ok, c] = index[p[ok, 0], p[ok, 1], p[ok, 2]]
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "color", (coords.sum(axis=1) % 2).astype(np.int8))

    @classmethod
    def full(cls, meta: GridMeta) -> "Domain":
        return cls(meta, np.ones(meta.dims, dtype=bool))

    @property
    def size(self) -> int:
        return len(self.coords)

    def gather(self, data: np.ndarray) -> np.ndarray:
        """Values of a grid-shaped array at the domain voxels (trailing axes kept)."""
        return data[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]]

    def scatter(self, values: np.ndarray, fill=0) -> np.ndarray:
        out = np.full(self.meta.dims, fill, dtype=np.asarray(values).dtype)
        out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = values
        return out

    def edges(self) -> np.ndarray:
        """Unordered neighbor pairs ``(a, b)`` with ``a < b``."""
        a = np.repeat(np.arange(self.size), 6)
        b = self.neighbors.ravel()
        keep = (b >= 0) & (a < b)
        return np.stack([a[keep], b[keep]], axis=1)


# ----------------------------------------------------------------------------
# Distance fields
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Signed distances of every (atlas, label) pair, gathered on a domain.

    ``values`` has shape (N, L, V); ``absent`` lists (atlas index, label)
    pairs whose label does not occur in that atlas.
    """

    labels: tuple[int, ...]
    values: np.ndarray
    d_max: float
    absent: frozenset = frozenset()


def _cache_key(labels: LabelVolume, d_max: float) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(labels.data).tobytes())
    h.update(repr((labels.meta.dims, labels.meta.spacing, float(d_max))).encode())
    return h.hexdigest()[:16]


def _field_for(label_vol: LabelVolume, atlas_id: str, label: int, d_max: float, cache_dir: Path | None):
    if cache_dir is not None:
        sub = cache_dir / _cache_key(label_vol, d_max)
        path = sub / f"{atlas_id}_{label}.nii"
        if path.exists():
            return read_volume(path, kind="scalar").data.astype(np.float64)
    vol = signed_edt(label_vol, label, d_max=d_max)
    if cache_dir is not None:
        sub.mkdir(parents=True, exist_ok=True)
        write_volume(vol, path)
    return vol.data


def build_distance_field(
    label_maps: Sequence[LabelVolume],
    labels: Sequence[int],
    domain: Domain,
    d_max: float = DEFAULT_D_MAX,
    atlas_ids: Sequence[str] | None = None,
    workers: int = 1,
    cache_dir=None,
) -> DistanceField:
    """Signed EDT of every (atlas, label) pair.  Jobs run on ``workers`` threads.

    ``cache_dir`` (or ``$FUSELAGE_CACHE``) persists each field as
    ``{atlas_id}_{label_id}.nii`` under a directory keyed by the label map's
    content hash.
    """
    labels = tuple(int(l) for l in labels)
    atlas_ids = list(atlas_ids) if atlas_ids is not None else [str(i) for i in range(len(label_maps))]
    if cache_dir is None and os.environ.get(CACHE_ENV):
        cache_dir = os.environ[CACHE_ENV]
    cache_dir = Path(cache_dir) if cache_dir else None
    jobs = [(n, li) for n in range(len(label_maps)) for li in range(len(labels))]
    values = np.empty((len(label_maps), len(labels), domain.size))

    def run(job):
        n, li = job
        full = _field_for(label_maps[n], atlas_ids[n], labels[li], d_max, cache_dir)
        values[n, li] = domain.gather(full)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    absent = frozenset(
        (n, l) for n in range(len(label_maps)) for l in labels if not label_present(label_maps[n], l)
    )
    return DistanceField(labels, values, float(d_max), absent)


# ----------------------------------------------------------------------------
# logOdds prior and Potts coupling
# ----------------------------------------------------------------------------


def logodds_logprior(distances: np.ndarray, rho: float) -> np.ndarray:
    """Log of the logOdds label prior, normalized over the label axis (-2).

    ``distances`` has shape (..., L, V); the logit of label ``l`` is
    ``-rho * D^l``.
    """
    if distances.shape[-2] == 0:
        raise ValueError("empty label set")
    logits = -rho * distances
    return logits - logsumexp(logits, axis=-2, keepdims=True)


def logodds_prior(fields: DistanceField, atlas_n: int, x: int, cfg: LogOddsConfig, label_set=None) -> np.ndarray:
    """Label probabilities at domain voxel ``x`` under atlas ``atlas_n``.

    ``label_set`` restricts (and orders) the labels; default is every label
    in ``fields``.
    """
    if label_set is None:
        rows = list(range(len(fields.labels)))
    else:
        if len(label_set) == 0:
            raise ValueError("empty label set")
        rows = [fields.labels.index(int(l)) for l in label_set]
    d = fields.values[atlas_n, rows, x]
    return np.exp(logodds_logprior(d[:, None], cfg.rho)[:, 0])


def neighbor_sum(q: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """``sum_{y ~ x} q[..., y]`` for every voxel, truncated at the mask boundary.

    ``q`` has shape (N, V); ``neighbors`` (V, 6) with -1 for missing.
    """
    padded = np.concatenate([q, np.zeros((q.shape[0], 1))], axis=1)
    idx = np.where(neighbors >= 0, neighbors, q.shape[1])
    return padded[:, idx].sum(axis=2)


def mrf_meanfield_logterm(q: np.ndarray, x: int, n: int, cfg: MrfConfig, neighbors: np.ndarray) -> float:
    """Mean-field Potts message ``beta * sum_{y ~ x} q_y(n)`` at one voxel."""
    nb = neighbors[x]
    nb = nb[nb >= 0]
    return float(cfg.beta * q[n, nb].sum())
