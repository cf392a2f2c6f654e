"""Atlas records, label taxonomy and training-neighborhood selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import GridMeta, LabelVolume, ScalarVolume, VolumeError, check_same_grid, read_volume


class AtlasError(ValueError):
    pass


# (name, ids) rows; paired structures carry (left, right).
_TABLE_ROWS = [
    ("CerebralWhiteMatter", (2, 41)),
    ("CerebralCortex", (3, 42)),
    ("LateralVentricle", (4, 43)),
    ("CerebellarWhiteMatter", (7, 46)),
    ("CerebellarCortex", (8, 47)),
    ("Thalamus", (9, 48)),
    ("Caudate", (11, 50)),
    ("Putamen", (12, 51)),
    ("Pallidum", (13, 52)),
    ("3rd-Ventricle", (14,)),
    ("4th-Ventricle", (15,)),
    ("Hippocampus", (17, 53)),
    ("Amygdala", (18, 54)),
    ("Accumbens", (26, 58)),
    ("VentralDC", (28, 60)),
    ("Vermis", (172,)),
    ("Midbrain", (173,)),
    ("Pons", (174,)),
    ("Medulla", (175,)),
]

BACKGROUND = 0


@dataclass(frozen=True)
class LabelTable:
    """Label name <-> ID mapping.

    ``entries`` holds one ``(name, id)`` pair per ID, including ``Unknown = 0``
    for background.  :meth:`lookup` accepts either a per-side name
    (``"L-Thalamus"``) or a row name (``"L/R Thalamus"``, ``"Thalamus"``) and
    returns a tuple of IDs.
    """

    entries: tuple[tuple[str, int], ...]
    wm_cortex_ids: frozenset[int]
    rows: tuple[tuple[str, tuple[int, ...]], ...] = ()

    def __post_init__(self):
        ids = [i for _, i in self.entries]
        if len(set(ids)) != len(ids):
            raise AtlasError("label IDs must be unique")
        if not self.wm_cortex_ids <= set(ids):
            raise AtlasError("wm_cortex_ids must be a subset of the table IDs")

    @property
    def ids(self) -> list[int]:
        return [i for _, i in self.entries]

    @property
    def structure_ids(self) -> list[int]:
        return [i for i in self.ids if i != BACKGROUND]

    def name(self, label_id: int) -> str:
        for n, i in self.entries:
            if i == label_id:
                return n
        raise KeyError(label_id)

    def lookup(self, name: str) -> tuple[int, ...]:
        key = name.replace("L/R ", "").replace("L/R-", "").strip()
        for row, ids in self.rows:
            if row == key:
                return ids
        for n, i in self.entries:
            if n == name:
                return (i,)
        raise KeyError(name)


def label_table() -> LabelTable:
    entries = [("Unknown", BACKGROUND)]
    for name, ids in _TABLE_ROWS:
        if len(ids) == 2:
            entries.append((f"L-{name}", ids[0]))
            entries.append((f"R-{name}", ids[1]))
        else:
            entries.append((name, ids[0]))
    return LabelTable(
        entries=tuple(entries),
        wm_cortex_ids=frozenset({2, 41, 3, 42}),
        rows=tuple(_TABLE_ROWS),
    )


@dataclass(frozen=True, eq=False)
class Atlas:
    id: str
    intensity: ScalarVolume
    labels: LabelVolume
    age_days: float = 0.0
    has_wm: bool = True

    def __post_init__(self):
        check_same_grid(self.intensity, self.labels)
        if not self.age_days >= 0:
            raise AtlasError(f"atlas {self.id}: age_days must be non-negative")


@dataclass(frozen=True, eq=False)
class AtlasSet:
    atlases: tuple[Atlas, ...]
    meta: GridMeta = field(init=False)

    def __post_init__(self):
        atlases = tuple(self.atlases)
        if not atlases:
            raise AtlasError("an atlas set needs at least one atlas")
        ids = [a.id for a in atlases]
        if len(set(ids)) != len(ids):
            raise AtlasError(f"duplicate atlas ids in {ids}")
        try:
            meta = check_same_grid(*[a.labels for a in atlases])
        except VolumeError as exc:
            raise AtlasError(str(exc)) from exc
        object.__setattr__(self, "atlases", atlases)
        object.__setattr__(self, "meta", meta)

    def __len__(self):
        return len(self.atlases)

    def __iter__(self):
        return iter(self.atlases)

    def __getitem__(self, i):
        return self.atlases[i]

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.atlases]

    def subset(self, ids: Sequence[str]) -> "AtlasSet":
        by_id = {a.id: a for a in self.atlases}
        return AtlasSet(tuple(by_id[i] for i in ids))

    def without(self, atlas_id: str) -> "AtlasSet":
        return AtlasSet(tuple(a for a in self.atlases if a.id != atlas_id))

    def check_labels(self, table: LabelTable) -> None:
        known = set(table.ids)
        for a in self.atlases:
            extra = set(a.labels.labels()) - known
            if extra:
                raise AtlasError(f"atlas {a.id} carries unknown label IDs {sorted(extra)}")


def load_manifest(path) -> AtlasSet:
    """Load a manifest JSON ``{"atlases": [{id, intensity_path, labels_path, age_days, has_wm}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AtlasError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    atlases = []
    for entry in doc.get("atlases", []):
        try:
            ipath = base / entry["intensity_path"]
            lpath = base / entry["labels_path"]
            intensity = read_volume(ipath, kind="scalar")
            labels = read_volume(lpath, kind="label")
            atlases.append(
                Atlas(
                    id=str(entry["id"]),
                    intensity=intensity,
                    labels=labels,
                    age_days=float(entry.get("age_days", 0.0)),
                    has_wm=bool(entry.get("has_wm", True)),
                )
            )
        except KeyError as exc:
            raise AtlasError(f"manifest entry missing field {exc}") from exc
        except VolumeError as exc:
            raise AtlasError(str(exc)) from exc
    return AtlasSet(tuple(atlases))


def manifest_mask_path(path) -> Path | None:
    """Optional top-level ``mask_path`` of a manifest, resolved."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if "mask_path" not in doc:
        return None
    return path.parent / doc["mask_path"]


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise AtlasError(f"neighborhood size k={k} outside [1, {n}]")


def select_by_age(atlases: AtlasSet, test_age_days: float, k: int) -> AtlasSet:
    """The ``k`` atlases closest in age, nearest first; ties go to the smaller id."""
    _check_k(k, len(atlases))
    order = sorted(atlases, key=lambda a: (abs(a.age_days - test_age_days), a.id))
    return AtlasSet(tuple(order[:k]))


def _bin(values: np.ndarray, bins: int) -> np.ndarray | None:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return None
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def entropy(values: np.ndarray, bins: int = 32) -> float:
    """Plug-in entropy (nats) of equal-width histogram over [min, max]."""
    idx = _bin(np.asarray(values, dtype=np.float64).ravel(), bins)
    if idx is None:
        return 0.0
    p = np.bincount(idx, minlength=bins) / idx.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Plug-in MI (nats) from a joint histogram with ``bins`` equal-width bins per axis.

    Each axis spans its own [min, max].  A constant image gives MI 0.
    """
    if bins < 2:
        raise AtlasError("bins must be >= 2")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ia, ib = _bin(a, bins), _bin(b, bins)
    if ia is None or ib is None:
        return 0.0
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    pxy = joint / a.size
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return max(mi, 0.0)


def select_by_mi(atlases: AtlasSet, test_image: ScalarVolume, k: int, bins: int = 32) -> AtlasSet:
    """The ``k`` atlases with highest MI against ``test_image``.

    MI is evaluated over the test image's foreground (nonzero voxels); ties
    go to the smaller id.
    """
    _check_k(k, len(atlases))
    if bins < 2:
        raise AtlasError("bins must be >= 2")
    try:
        check_same_grid(test_image, atlases.meta)
    except VolumeError as exc:
        raise AtlasError(str(exc)) from exc
    fg = test_image.data != 0
    if not fg.any():
        fg = np.ones_like(fg)
    t = test_image.data[fg]
    scored = [(-mutual_information(t, a.intensity.data[fg], bins), a.id, a) for a in atlases]
    scored.sort(key=lambda s: (s[0], s[1]))
    return AtlasSet(tuple(s[2] for s in scored[:k]))
