"""Synthetic phantoms, brute-force oracles and the jackknife harness.

A phantom is a nested-ellipsoid "brain" labeled with FreeSurfer IDs:
cortex shell, white matter, lateral ventricles and subcortical blobs (thalamus,
caudate), split into hemispheres at the x midline, surrounded by a background
ring inside the brain mask.  Atlases are the same geometry at the atlas's age,
warped by a smooth sinusoidal displacement to mimic residual registration
error, with freshly sampled intensities.  The test image is drawn from the
intensity model itself: ``I* ~ N(mu_l, sigma^2)`` then ``I = I* exp(-b)``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .atlas import Atlas, AtlasSet, select_by_age, select_by_mi
from .intensity import BiasModel, LabelMixture, basis_exponents
from .metrics import generalized_dice, report
from .prior import DEFAULT_D_MAX, _offset_distance
from .vem import VemConfig, VemState, run_vem
from .volume import GridMeta, LabelVolume, ScalarVolume, write_volume

MIN_SIZE = 16
MAX_AGE_DAYS = 730.0

# label -> mean of I*; contrast unit for noise is WM - cortex
TISSUE_MEANS = {
    0: 0.30,
    4: 0.45, 43: 0.45,
    3: 0.60, 42: 0.60,
    11: 0.75, 50: 0.75,
    9: 0.85, 48: 0.85,
    2: 1.00, 41: 1.00,
}
CONTRAST = TISSUE_MEANS[2] - TISSUE_MEANS[3]

# (left id, right id, center (x>0 side), radii) in normalized coordinates
_BLOBS = (
    (4, 43, (0.17, 0.10, 0.08), (0.10, 0.26, 0.12)),
    (9, 48, (0.16, -0.22, -0.05), (0.13, 0.15, 0.13)),
    (11, 50, (0.30, 0.30, 0.10), (0.09, 0.13, 0.11)),
)
_BRAIN_RADII = (0.78, 0.70, 0.64)
_CORTEX_THICKNESS = 0.16


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    size: int | tuple[int, int, int] = 32
    n_atlases: int = 5
    noise_sigma: float = 0.05
    bias: float = 0.0
    bias_degree: int = 2
    bias_coeffs: tuple[float, ...] | None = None
    deformation: float = 1.0
    no_wm_fraction: float = 0.0
    test_age_days: float = 365.0
    age_growth: float = 0.0
    atlas_bias: bool = True
    mask_margin: int = 2

    @property
    def dims(self) -> tuple[int, int, int]:
        s = self.size
        return (s, s, s) if isinstance(s, int) else tuple(int(v) for v in s)

    def __post_init__(self):
        if min(self.dims) < MIN_SIZE:
            raise PhantomError(f"grid {self.dims} too small for the phantom geometry (min {MIN_SIZE}^3)")
        if self.n_atlases < 1:
            raise PhantomError("need at least one atlas")
        if self.noise_sigma < 0 or self.deformation < 0 or self.bias < 0:
            raise PhantomError("noise, deformation and bias magnitudes must be >= 0")
        if not 0 <= self.no_wm_fraction <= 1:
            raise PhantomError("no_wm_fraction must lie in [0, 1]")
        if not 0 <= self.age_growth < 1:
            raise PhantomError("age_growth must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class PhantomInstance:
    config: PhantomConfig
    truth: LabelVolume
    image: ScalarVolume
    clean: ScalarVolume
    mask: LabelVolume
    atlases: AtlasSet
    params: LabelMixture
    bias: BiasModel
    loglik_record: np.ndarray
    test_age_days: float
    manifest_path: Path | None = None


# ----------------------------------------------------------------------------
# Geometry and sampling
# ----------------------------------------------------------------------------


def _coords(dims, displacement=None):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    if displacement is not None:
        grids = [g + d for g, d in zip(grids, displacement)]
    return [(g - (n - 1) / 2) / (n / 2) for g, n in zip(grids, dims)]


def _inside(u, center, radii):
    return sum(((c - o) / r) ** 2 for c, o, r in zip(u, center, radii)) <= 1.0


def geometry(dims, age_days: float = 365.0, age_growth: float = 0.0) -> np.ndarray:
    """Label map of the phantom brain at ``age_days``; growth scales the brain."""
    scale = 1.0 - age_growth * (1.0 - min(age_days, MAX_AGE_DAYS) / MAX_AGE_DAYS)
    u = [c / scale for c in _coords(dims)]
    left = u[0] < 0
    out = np.zeros(dims, dtype=np.int32)
    brain = _inside(u, (0, 0, 0), _BRAIN_RADII)
    inner = _inside(u, (0, 0, 0), tuple(r - _CORTEX_THICKNESS for r in _BRAIN_RADII))
    out[brain] = np.where(left, 3, 42)[brain]
    out[inner] = np.where(left, 2, 41)[inner]
    for lid, rid, (cx, cy, cz), radii in _BLOBS:
        out[_inside(u, (-cx, cy, cz), radii) & inner] = lid
        out[_inside(u, (cx, cy, cz), radii) & inner] = rid
    return out


def brain_mask(truth: np.ndarray, margin: int) -> np.ndarray:
    brain = truth > 0
    if margin <= 0:
        return brain
    ball = ndimage.generate_binary_structure(3, 1)
    return ndimage.binary_dilation(brain, ball, iterations=margin)


def smooth_displacement(dims, magnitude: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Sum-of-sinusoids displacement (voxels) with max |d_c| == ``magnitude`` per axis."""
    if magnitude == 0:
        return [np.zeros(dims) for _ in range(3)]
    u = _coords(dims)
    out = []
    for _ in range(3):
        field = np.zeros(dims)
        for _ in range(2):
            k = rng.uniform(0.5, 1.5, size=3) * rng.choice([-1, 1], size=3)
            phase = rng.uniform(0, 2 * math.pi)
            field += rng.uniform(0.5, 1.0) * np.sin(math.pi * sum(ki * ui for ki, ui in zip(k, u)) + phase)
        peak = np.abs(field).max()
        out.append(field * (magnitude / peak) if peak > 0 else field)
    return out


def warp_labels(labels: np.ndarray, displacement) -> np.ndarray:
    """Nearest-neighbor pull-back ``labels(x + d(x))``, clamped at the grid edge."""
    dims = labels.shape
    idx = []
    for axis, n in enumerate(dims):
        g = np.arange(n, dtype=np.float64).reshape([-1 if a == axis else 1 for a in range(3)])
        idx.append(np.clip(np.floor(g + displacement[axis] + 0.5), 0, n - 1).astype(np.intp))
    return labels[tuple(np.broadcast_arrays(*idx))]


def truth_mixture(labels: Sequence[int], noise_sigma: float) -> LabelMixture:
    labels = sorted(int(l) for l in labels)
    sigma = noise_sigma * CONTRAST
    var = max(sigma * sigma, 1e-12)
    return LabelMixture.single(labels, [TISSUE_MEANS[l] for l in labels], [var] * len(labels))


def _sample_clean(label_map: np.ndarray, mask: np.ndarray, noise_sigma: float, rng) -> np.ndarray:
    means = np.vectorize(TISSUE_MEANS.get, otypes=[np.float64])(label_map)
    sigma = noise_sigma * CONTRAST
    noise = rng.standard_normal(label_map.shape) * sigma if sigma > 0 else 0.0
    return np.where(mask, means + noise, 0.0)


def _random_bias(cfg: PhantomConfig, rng) -> BiasModel:
    n = len(basis_exponents(cfg.bias_degree))
    if cfg.bias_coeffs is not None:
        c = np.asarray(cfg.bias_coeffs, dtype=np.float64)
        if c.shape != (n,):
            raise PhantomError(f"bias_coeffs must have {n} entries for degree {cfg.bias_degree}")
        return BiasModel(cfg.bias_degree, c)
    c = np.zeros(n)
    if cfg.bias > 0:
        c[1:] = rng.uniform(-cfg.bias, cfg.bias, size=n - 1)
    return BiasModel(cfg.bias_degree, c)


def _gaussian_loglik(values, label_map, mix: LabelMixture) -> np.ndarray:
    """Generator-side record of log N(I*; mu_l, var_l), written independently of intensity.py."""
    mu = np.zeros(values.shape)
    var = np.ones(values.shape)
    for li, l in enumerate(mix.labels):
        sel = label_map == l
        mu[sel] = mix.means[li, 0]
        var[sel] = mix.variances[li, 0]
    return -0.5 * np.log(2 * math.pi * var) - (values - mu) ** 2 / (2 * var)


def atlas_ages(n: int, rng) -> np.ndarray:
    """Ages spread over 0-2 years: evenly spaced strata with jitter."""
    edges = np.linspace(0.0, MAX_AGE_DAYS, n + 1)
    return np.round(rng.uniform(edges[:-1], edges[1:]), 1)


def generate(cfg: PhantomConfig) -> PhantomInstance:
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    meta = GridMeta(dims)
    truth = geometry(dims, cfg.test_age_days, cfg.age_growth)
    mask = brain_mask(truth, cfg.mask_margin)
    labels_used = sorted(set(np.unique(truth[mask]).tolist()))
    params = truth_mixture(labels_used, cfg.noise_sigma)

    bias = _random_bias(cfg, rng)
    clean = _sample_clean(truth, mask, cfg.noise_sigma, rng)
    log_field = bias.log_field(meta)
    image = clean * np.exp(-log_field)
    loglik = np.where(mask, _gaussian_loglik(clean, truth, params), 0.0) if cfg.noise_sigma > 0 else None

    ages = atlas_ages(cfg.n_atlases, rng)
    n_no_wm = int(round(cfg.no_wm_fraction * cfg.n_atlases))
    no_wm = set(rng.choice(cfg.n_atlases, size=n_no_wm, replace=False).tolist()) if n_no_wm else set()
    atlases = []
    for n in range(cfg.n_atlases):
        base = geometry(dims, float(ages[n]), cfg.age_growth)
        disp = smooth_displacement(dims, cfg.deformation, rng)
        lab = warp_labels(base, disp)
        amask = brain_mask(lab, cfg.mask_margin)
        a_clean = _sample_clean(lab, amask, cfg.noise_sigma, rng)
        if cfg.atlas_bias and cfg.bias > 0:
            a_img = a_clean * np.exp(-_random_bias(replace_coeffs(cfg), rng).log_field(meta))
        else:
            a_img = a_clean
        atlases.append(
            Atlas(
                id=f"atlas{n:02d}",
                intensity=ScalarVolume(meta, a_img),
                labels=LabelVolume(meta, lab),
                age_days=float(ages[n]),
                has_wm=n not in no_wm,
            )
        )
    return PhantomInstance(
        config=cfg,
        truth=LabelVolume(meta, truth),
        image=ScalarVolume(meta, image),
        clean=ScalarVolume(meta, clean),
        mask=LabelVolume(meta, mask.astype(np.int32)),
        atlases=AtlasSet(tuple(atlases)),
        params=params,
        bias=bias,
        loglik_record=loglik,
        test_age_days=cfg.test_age_days,
    )


def replace_coeffs(cfg: PhantomConfig) -> PhantomConfig:
    """Config for drawing a random per-atlas bias (ignores explicit coefficients)."""
    d = asdict(cfg)
    d["bias_coeffs"] = None
    return PhantomConfig(**d)


def write_instance(inst: PhantomInstance, out_dir) -> Path:
    """Write volumes and ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    (out / "atlases").mkdir(parents=True, exist_ok=True)
    write_volume(inst.image, out / "image.nii.gz")
    write_volume(inst.truth, out / "truth.nii.gz")
    write_volume(inst.mask, out / "mask.nii.gz")
    entries = []
    for a in inst.atlases:
        ip = Path("atlases") / f"{a.id}_intensity.nii.gz"
        lp = Path("atlases") / f"{a.id}_labels.nii.gz"
        write_volume(a.intensity, out / ip)
        write_volume(a.labels, out / lp)
        entries.append(
            {"id": a.id, "intensity_path": str(ip), "labels_path": str(lp), "age_days": a.age_days, "has_wm": a.has_wm}
        )
    cfg = asdict(inst.config)
    manifest = {
        "atlases": entries,
        "mask_path": "mask.nii.gz",
        "test": {"image_path": "image.nii.gz", "truth_path": "truth.nii.gz", "age_days": inst.test_age_days},
        "truth_params": {"mixture": inst.params.to_dict(), "bias": inst.bias.to_dict()},
        "phantom_config": cfg,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# ----------------------------------------------------------------------------
# Oracles
# ----------------------------------------------------------------------------

MAX_CONFIGS = 2**20


def enumerate_membership(log_evidence: np.ndarray, edges: np.ndarray, beta: float, allowed: np.ndarray | None = None):
    """Exact posterior of the membership field by enumerating every configuration.

    ``log_evidence`` is (N, V) with entries ``log e_n(x)``; ``edges`` the
    unordered neighbor pairs.  Returns ``(marginals (N, V), log_sum, log_z)``
    where ``log_sum = log sum_M exp(beta * agreements(M)) prod_x e_{M(x)}(x)``
    and ``log_z`` is the same sum with unit evidence (the Potts partition
    function over the allowed configurations).
    """
    n, v = log_evidence.shape
    if n**v > MAX_CONFIGS:
        raise PhantomError(f"{n}^{v} configurations exceed the enumeration limit {MAX_CONFIGS}")
    configs = np.array(list(itertools.product(range(n), repeat=v)), dtype=np.intp).reshape(-1, v)
    vox = np.arange(v)
    agree = np.zeros(len(configs))
    for a, b in edges:
        agree += configs[:, a] == configs[:, b]
    prior = beta * agree
    if allowed is not None:
        ok = allowed[configs, vox].all(axis=1)
        prior = np.where(ok, prior, -np.inf)
    logw = prior + log_evidence[configs, vox].sum(axis=1)
    log_sum = logsumexp(logw)
    w = np.exp(logw - log_sum)
    marg = np.zeros((n, v))
    for k in range(n):
        marg[k] = w @ (configs == k)
    return marg, float(log_sum), float(logsumexp(prior))


@dataclass
class ExactPosterior:
    membership: np.ndarray
    labels: np.ndarray
    log_evidence: float
    log_z: float


def exact_membership_posterior(state: VemState) -> ExactPosterior:
    """Exact membership and label marginals for the model parameters held by ``state``.

    Only feasible for tiny domains (``N^V <= 2^20``).  The label marginal is
    ``p(L(x)=l) = sum_n P(M(x)=n) pi_{n,l}(x) p(I*|l) / e_n(x)``.
    """
    log_joint = state.log_joint()
    log_ev = logsumexp(log_joint, axis=1)
    marg, log_sum, log_z = enumerate_membership(log_ev, state.domain.edges(), state.cfg.beta, state.allowed)
    cond = np.exp(log_joint - log_ev[:, None, :])
    labels = np.einsum("nv,nlv->lv", marg, cond)
    return ExactPosterior(marg, labels, log_sum, log_z)


def brute_force_edt(labels: LabelVolume, label_id: int, meta: GridMeta | None = None, d_max: float = DEFAULT_D_MAX) -> ScalarVolume:
    """Signed distance by exhaustive search; same conventions as ``prior.signed_edt``."""
    meta = meta or labels.meta
    if meta.size > 16**3:
        raise PhantomError("brute-force EDT limited to 16^3 voxels")
    obj = labels.data == label_id
    pts = np.indices(meta.dims).reshape(3, -1).T
    flat = obj.ravel()
    out = np.empty(len(pts))
    inside, outside = pts[flat], pts[~flat]
    for i, p in enumerate(pts):
        others = outside if flat[i] else inside
        if len(others) == 0:
            out[i] = -d_max if flat[i] else d_max
            continue
        d = _offset_distance(p[None, :] - others, meta.spacing).min()
        out[i] = -d if flat[i] else d
    return ScalarVolume(meta, np.clip(out.reshape(meta.dims), -d_max, d_max))


# ----------------------------------------------------------------------------
# Jackknife
# ----------------------------------------------------------------------------

JACKKNIFE_COLUMNS = ["subject_id", "k", "label_id", "dice", "gen_dice"]


@dataclass
class JackknifeRun:
    subject_id: str
    age_days: float
    k: int
    selected: list[str]
    gen_dice: float
    dice: dict[int, float | None]


@dataclass
class JackknifeResult:
    runs: list[JackknifeRun] = field(default_factory=list)

    def winning_k(self) -> dict[str, int]:
        """Per subject, the k with the highest Generalized Dice (ties -> smaller k)."""
        best = {}
        for r in self.runs:
            cur = best.get(r.subject_id)
            if cur is None or r.gen_dice > cur.gen_dice or (r.gen_dice == cur.gen_dice and r.k < cur.k):
                best[r.subject_id] = r
        return {s: r.k for s, r in best.items()}

    def winning_histogram(self) -> dict[int, int]:
        counts = Counter(self.winning_k().values())
        ks = sorted({r.k for r in self.runs})
        return {k: counts.get(k, 0) for k in ks}

    def age_group_summary(self, edges=(0, 90, 365, 730.1)) -> list[dict]:
        out = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            for k in sorted({r.k for r in self.runs}):
                vals = [r.gen_dice for r in self.runs if r.k == k and lo <= r.age_days < hi]
                if vals:
                    out.append({"age_lo": lo, "age_hi": hi, "k": k, "mean": float(np.mean(vals)), "max": float(np.max(vals)), "n": len(vals)})
        return out

    def rows(self) -> list[dict]:
        """One row per run, carrying the Generalized Dice."""
        return [
            {"subject_id": r.subject_id, "k": r.k, "label_id": "GENERALIZED", "dice": repr(r.gen_dice), "gen_dice": repr(r.gen_dice)}
            for r in self.runs
        ]

    def label_rows(self) -> list[dict]:
        out = []
        for r in self.runs:
            for l, d in sorted(r.dice.items()):
                out.append({"subject_id": r.subject_id, "k": r.k, "label_id": l, "dice": "" if d is None else repr(d), "gen_dice": repr(r.gen_dice)})
        return out

    def write(self, path) -> dict[str, Path]:
        """Write ``path`` (one row per run) plus per-label, histogram and summary files."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stem = path.with_suffix("")
        files = {"runs": path, "labels": Path(f"{stem}_labels.csv"), "winning_k": Path(f"{stem}_winning_k.csv"), "summary": Path(f"{stem}_summary.json")}
        for key, rows in (("runs", self.rows()), ("labels", self.label_rows())):
            with open(files[key], "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=JACKKNIFE_COLUMNS)
                w.writeheader()
                w.writerows(rows)
        with open(files["winning_k"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "wins"])
            for k, c in self.winning_histogram().items():
                w.writerow([k, c])
        summary = {
            "n_runs": len(self.runs),
            "winning_k": self.winning_k(),
            "winning_histogram": {str(k): v for k, v in self.winning_histogram().items()},
            "age_groups": self.age_group_summary(),
            "per_subject": [
                {"subject_id": r.subject_id, "age_days": r.age_days, "k": r.k, "selected": r.selected, "gen_dice": r.gen_dice}
                for r in self.runs
            ],
        }
        files["summary"].write_text(json.dumps(summary, indent=2))
        return files


def _jackknife_job(args):
    family, mask, subject_id, k, cfg, select = args
    subject = next(a for a in family if a.id == subject_id)
    others = family.without(subject_id)
    if select == "mi":
        chosen = select_by_mi(others, subject.intensity, k)
    else:
        chosen = select_by_age(others, subject.age_days, k)
    if mask is None:
        mask = brain_mask(subject.labels.data, 2)
    res = run_vem(chosen, subject.intensity, cfg, mask=mask)
    rep = report(subject.labels, res.map_labels)
    return JackknifeRun(subject_id, subject.age_days, k, chosen.ids, rep.generalized, dict(rep.dice))


def jackknife(
    family: AtlasSet,
    sizes: Sequence[int],
    cfg: VemConfig | None = None,
    mask=None,
    select: str = "age",
    workers: int = 1,
) -> JackknifeResult:
    """Leave-one-out over ``family``: every member is segmented from the
    ``k`` selected remaining members, for every ``k`` in ``sizes``.

    ``mask`` defaults to each held-out subject's dilated brain.  Runs are
    merged in (subject order, k order) regardless of ``workers``.
    """
    cfg = cfg or VemConfig()
    sizes = [int(k) for k in sizes]
    if not sizes:
        raise PhantomError("no neighborhood sizes given")
    if len(family) < max(sizes) + 1:
        raise PhantomError(f"family of {len(family)} too small for k={max(sizes)}")
    if min(sizes) < 1:
        raise PhantomError("neighborhood sizes must be >= 1")
    jobs = [(family, mask, a.id, k, cfg, select) for a in family for k in sizes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_jackknife_job, jobs))
    else:
        runs = [_jackknife_job(j) for j in jobs]
    return JackknifeResult(runs)


def gen_dice_vs_truth(inst: PhantomInstance, labels: LabelVolume) -> float:
    ids = sorted(set(inst.truth.labels()) - {0})
    return generalized_dice(inst.truth, labels, ids)
