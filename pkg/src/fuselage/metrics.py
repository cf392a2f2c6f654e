"""Overlap metrics and the Tenengrad sharpness score."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .atlas import LabelTable, label_table
from .volume import LabelVolume, ScalarVolume, VolumeError, check_same_grid


def _arrays(a, b):
    if isinstance(a, LabelVolume) or isinstance(b, LabelVolume):
        check_same_grid(a, b)
        return a.data, b.data
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise VolumeError(f"grid mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, label: int) -> float | None:
    """Dice overlap of one label; ``None`` when it is empty in either volume."""
    a, b = _arrays(a, b)
    ma, mb = a == label, b == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 or nb == 0:
        return None
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def generalized_dice(a, b, labels: Iterable[int]) -> float:
    """Crisp multi-label Dice over the label set ``labels``.

    ``2 |{x: A(x) = B(x) in S}| / (|{A in S}| + |{B in S}|)``; 1.0 when
    neither volume contains any label of ``S``.
    """
    a, b = _arrays(a, b)
    s = np.asarray(sorted(set(int(l) for l in labels)))
    if s.size == 0:
        raise ValueError("label set must be nonempty")
    in_a, in_b = np.isin(a, s), np.isin(b, s)
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((in_a & (a == b)).sum()) / denom


def _slice_gradient_energy(img: np.ndarray) -> np.ndarray:
    """Sobel Gx^2 + Gy^2 on interior pixels of a 2D array."""
    c = img
    # correlation with [[-1,0,1],[-2,0,2],[-1,0,1]] along axis 0 and its transpose
    dx = c[2:, :] - c[:-2, :]
    gx = dx[:, :-2] + 2 * dx[:, 1:-1] + dx[:, 2:]
    dy = c[:, 2:] - c[:, :-2]
    gy = dy[:-2, :] + 2 * dy[1:-1, :] + dy[2:, :]
    return gx**2 + gy**2


def tenengrad(vol: ScalarVolume) -> float:
    """Mean Sobel gradient energy of the middle axial slice.

    The slice (z index ``nz // 2``) is divided by its maximum absolute value
    first, so the score does not depend on the intensity scale.
    """
    nx, ny, nz = vol.meta.dims
    if nz < 3:
        raise ValueError("tenengrad needs at least 3 slices")
    if nx < 3 or ny < 3:
        raise ValueError("slice too small for a 3x3 kernel")
    sl = np.asarray(vol.data[:, :, nz // 2], dtype=np.float64)
    top = float(np.abs(sl).max())
    if top == 0 or float(sl.max() - sl.min()) == 0:
        return 0.0
    return float(_slice_gradient_energy(sl / top).mean())


@dataclass
class OverlapReport:
    labels: list[int]
    dice: dict[int, float | None]
    counts: dict[int, tuple[int, int, int]]
    generalized: float
    used: list[int]
    names: dict[int, str] = field(default_factory=dict)

    def absent(self) -> list[int]:
        return [l for l in self.labels if self.dice[l] is None]

    def rows(self) -> list[dict]:
        out = []
        for l in self.labels:
            na, nb, ni = self.counts[l]
            d = self.dice[l]
            out.append(
                {
                    "label_id": l,
                    "label_name": self.names.get(l, str(l)),
                    "dice": "" if d is None else repr(d),
                    "|A|": na,
                    "|B|": nb,
                    "|A∩B|": ni,
                }
            )
        na = sum(self.counts[l][0] for l in self.used)
        nb = sum(self.counts[l][1] for l in self.used)
        ni = sum(self.counts[l][2] for l in self.used)
        out.append(
            {"label_id": "GENERALIZED", "label_name": "GENERALIZED", "dice": repr(self.generalized), "|A|": na, "|B|": nb, "|A∩B|": ni}
        )
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_dict(self) -> dict:
        return {
            "labels": [
                {
                    "label_id": l,
                    "label_name": self.names.get(l, str(l)),
                    "dice": self.dice[l],
                    "absent": self.dice[l] is None,
                    "count_a": self.counts[l][0],
                    "count_b": self.counts[l][1],
                    "count_intersection": self.counts[l][2],
                }
                for l in self.labels
            ],
            "generalized_dice": self.generalized,
            "label_set": self.used,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def report(a, b, table: LabelTable | None = None) -> OverlapReport:
    """Per-label Dice for every structure label of ``table`` found in either
    volume, and Generalized Dice over the labels present in both.

    Labels present in only one volume are reported as absent and left out of
    the Generalized Dice label set.
    """
    table = table or label_table()
    da, db = _arrays(a, b)
    present = sorted(set(np.unique(da)) | set(np.unique(db)))
    ids = [int(l) for l in present if int(l) in set(table.structure_ids)]
    dvals, counts = {}, {}
    for l in ids:
        ma, mb = da == l, db == l
        counts[l] = (int(ma.sum()), int(mb.sum()), int((ma & mb).sum()))
        dvals[l] = dice(da, db, l)
    used = [l for l in ids if dvals[l] is not None]
    gen = generalized_dice(da, db, used) if used else 1.0
    names = {l: table.name(l) for l in ids}
    return OverlapReport(ids, dvals, counts, gen, used, names)
