"""Variational EM for multi-atlas label fusion.

Model, per voxel ``x`` of the brain mask ``Omega``:

* membership ``M`` ~ Potts MRF with coupling ``beta`` on unordered 6-neighbor pairs;
* label ``L(x) | M(x)=n`` ~ logOdds prior ``pi_{n,l}(x) = softmax_l(-rho D_n^l(x))``;
* ``I*(x) | L(x)=l`` ~ Gaussian mixture of label ``l``;
* ``I(x) = I*(x) exp(-b(x))`` with ``b = sum_p c_p psi_p``.

With the labels summed out, the per-atlas evidence is
``e_n(x) = sum_l pi_{n,l}(x) p(I*(x) | l)`` and the mean-field free energy
(evidence lower bound, without the constant ``-log Z(beta)``) is::

    F(q, theta) = sum_x sum_n q_x(n) log e_n(x)
                + beta * sum_{x~y} sum_n q_x(n) q_y(n)
                - sum_x sum_n q_x(n) log q_x(n)
                + sum_x b(x)

The last term is the log-Jacobian of ``I -> I*``.  The E-step is
coordinate ascent on ``q`` (checkerboard colors are conditionally
independent under 6-connectivity); the mixture M-step is an EM update with
label responsibilities ``r_x(l) = sum_n q_x(n) pi_{n,l}(x) p(I*|l) / e_n(x)``;
the bias M-step is a log-domain least-squares proposal accepted only if it
does not lower ``F`` (step-halving otherwise), so the trace of ``F`` over
outer iterations is non-decreasing.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .atlas import AtlasSet, LabelTable, label_table
from .intensity import (
    BiasModel,
    LabelMixture,
    default_variance_floor,
    evaluate_basis,
    fit_bias,
    floor_intensities,
    log_likelihood,
    m_step_mixture,
)
from .prior import DEFAULT_D_MAX, Domain, build_distance_field, logodds_logprior
from .volume import LabelVolume, ScalarVolume, VolumeError, check_same_grid

log = logging.getLogger(__name__)


class VemError(RuntimeError):
    """Inference failure; ``diagnostics`` carries the state summary."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class VemConfig:
    beta: float = 0.5
    rho: float = 1.0
    max_outer_iters: int = 30
    meanfield_sweeps_per_estep: int = 5
    tol: float = 1e-5
    seed: int = 0
    bias_degree: int | None = 4
    components: int = 1
    d_max: float = DEFAULT_D_MAX
    schedule: str = "checkerboard"
    workers: int = 1
    var_floor: float | None = None
    bias_backtracks: int = 12
    dump_dir: str | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.max_outer_iters < 0 or self.meanfield_sweeps_per_estep < 1:
            raise ValueError("iteration counts must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not 1 <= self.components <= 3:
            raise ValueError("components per label must be in 1..3")
        if self.bias_degree is not None and self.bias_degree < 0:
            raise ValueError("bias degree must be >= 0")
        if self.schedule not in ("checkerboard", "synchronous"):
            raise ValueError(f"unknown sweep schedule {self.schedule!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True, eq=False)
class VemState:
    """Everything the E and M steps read.  Arrays are over domain voxels (V).

    ``log_prior`` is (N, L, V); ``allowed`` (N, V) marks atlases the masking
    rule leaves available at each voxel; ``q`` is (N, V).
    """

    cfg: VemConfig
    domain: Domain
    labels: tuple[int, ...]
    log_prior: np.ndarray
    allowed: np.ndarray
    image: np.ndarray
    basis: np.ndarray
    mix: LabelMixture
    bias: BiasModel
    q: np.ndarray
    fallback_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def n_atlases(self) -> int:
        return self.log_prior.shape[0]

    def log_bias(self) -> np.ndarray:
        return self.bias.coeffs @ self.basis

    def i_star(self) -> np.ndarray:
        return self.image * np.exp(self.log_bias())

    def log_joint(self) -> np.ndarray:
        """``log pi_{n,l}(x) + log p(I*(x) | l)``: (N, L, V)."""
        return self.log_prior + log_likelihood(self.mix, self.i_star())[None]

    def log_evidence(self, log_joint: np.ndarray | None = None) -> np.ndarray:
        """``log e_n(x)``: (N, V)."""
        if log_joint is None:
            log_joint = self.log_joint()
        return logsumexp(log_joint, axis=1)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    map_labels: LabelVolume
    labels: tuple[int, ...]
    label_posterior: np.ndarray
    bias: BiasModel
    params: LabelMixture
    free_energy_trace: list[float]
    q: np.ndarray
    domain: Domain
    iterations: int
    converged: bool
    wallclock: float = 0.0

    def posterior_volume(self, label: int) -> ScalarVolume:
        row = self.labels.index(int(label))
        return ScalarVolume(self.domain.meta, self.domain.scatter(self.label_posterior[row], fill=0.0))

    def report(self, cfg: VemConfig) -> dict:
        return {
            "config": asdict(cfg),
            "elbo_trace": list(self.free_energy_trace),
            "iters": self.iterations,
            "converged": self.converged,
            "wallclock": self.wallclock,
            "labels": list(self.labels),
            "params": self.params.to_dict(),
            "bias": self.bias.to_dict(),
        }


# ----------------------------------------------------------------------------
# Masking rule
# ----------------------------------------------------------------------------


def mask_rule_allowed(atlas_labels: np.ndarray, has_wm, table: LabelTable) -> np.ndarray:
    """(N, V) boolean: False where atlas ``n`` lacks GM/WM and labels ``x`` as WM or cortex."""
    atlas_labels = np.asarray(atlas_labels)
    wm = np.isin(atlas_labels, sorted(table.wm_cortex_ids))
    flagged = ~np.asarray(has_wm, dtype=bool)[:, None]
    return ~(wm & flagged)


def _restrict(allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the all-masked fallback: voxels with no allowed atlas allow all."""
    empty = ~allowed.any(axis=0)
    if empty.any():
        allowed = allowed.copy()
        allowed[:, empty] = True
    return allowed, np.flatnonzero(empty)


def apply_mask_rule(q: np.ndarray, atlases: AtlasSet, table: LabelTable | None = None, domain: Domain | None = None):
    """Zero ``q_x(n)`` where atlas ``n`` has ``has_wm=False`` and WM/cortex at ``x``.

    Affected voxels are renormalized; a voxel left with no mass falls back to
    uniform over all atlases.  Voxels the rule does not touch are returned
    unchanged.  ``q`` is (N, V) over ``domain`` (default: the full grid).
    """
    table = table or label_table()
    domain = domain or Domain.full(atlases.meta)
    labels = np.stack([domain.gather(a.labels.data) for a in atlases])
    allowed = mask_rule_allowed(labels, [a.has_wm for a in atlases], table)
    out = np.array(q, dtype=np.float64, copy=True)
    hit = np.flatnonzero((~allowed).any(axis=0))
    if hit.size == 0:
        return out
    sub = np.where(allowed[:, hit], out[:, hit], 0.0)
    tot = sub.sum(axis=0)
    dead = tot <= 0
    sub[:, dead] = 1.0 / out.shape[0]
    tot[dead] = 1.0
    out[:, hit] = sub / tot
    return out


# ----------------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------------


def _domain_for(meta, mask) -> Domain:
    if mask is None:
        return Domain.full(meta)
    data = mask.data if hasattr(mask, "data") else np.asarray(mask)
    if hasattr(mask, "meta"):
        check_same_grid(mask, meta)
    return Domain(meta, np.asarray(data) != 0)


def _majority_vote(atlas_labels: np.ndarray, allowed: np.ndarray, labels: tuple[int, ...]) -> np.ndarray:
    counts = np.stack([((atlas_labels == l) & allowed).sum(axis=0) for l in labels])
    return np.asarray(labels)[np.argmax(counts, axis=0)]


def _initial_mixture(vote, atlas_labels, i_star, labels, cfg: VemConfig, floor: float) -> LabelMixture:
    rng = np.random.default_rng(cfg.seed)
    c = cfg.components
    gmean, gvar = float(i_star.mean()), float(i_star.var())
    means = np.empty((len(labels), c))
    variances = np.empty((len(labels), c))
    for li, l in enumerate(labels):
        sel = vote == l
        if not sel.any():
            sel = (atlas_labels == l).any(axis=0)
        if sel.any():
            mu, var = float(i_star[sel].mean()), float(i_star[sel].var())
        else:
            mu, var = gmean, gvar
        var = max(var, floor)
        if c == 1:
            means[li] = mu
        else:
            spread = np.linspace(-0.5, 0.5, c) * np.sqrt(var)
            means[li] = mu + spread + rng.normal(0.0, 1e-3 * np.sqrt(var), size=c)
        variances[li] = var
    return LabelMixture(labels, np.full((len(labels), c), 1.0 / c), means, variances)


def initialize(
    atlases: AtlasSet,
    image: ScalarVolume,
    cfg: VemConfig | None = None,
    mask=None,
    table: LabelTable | None = None,
    cache_dir=None,
) -> VemState:
    """Build the initial state.

    ``q`` is uniform over the atlases the masking rule allows at each voxel;
    mixture parameters are per-label moments under the majority vote of the
    propagated labels; the bias is zero apart from its constant term, which
    is set to ``-log(mean I)`` so the corrected image has unit mean.  This
    fixes the scale shared by the bias constant and the mixture means.  With
    ``bias_degree=None`` there is no bias at all and ``I* = I``.
    """
    cfg = cfg or VemConfig()
    table = table or label_table()
    try:
        meta = check_same_grid(image, atlases.meta)
    except VolumeError as exc:
        raise VemError(str(exc)) from exc
    domain = _domain_for(meta, mask)
    if domain.size == 0:
        raise VemError("empty brain mask")
    atlas_labels = np.stack([domain.gather(a.labels.data) for a in atlases])
    labels = tuple(int(l) for l in np.unique(atlas_labels))

    fields = build_distance_field(
        [a.labels for a in atlases],
        labels,
        domain,
        d_max=cfg.d_max,
        atlas_ids=atlases.ids,
        workers=cfg.workers,
        cache_dir=cache_dir,
    )
    log_prior = logodds_logprior(fields.values, cfg.rho)

    allowed = mask_rule_allowed(atlas_labels, [a.has_wm for a in atlases], table)
    allowed, fallback = _restrict(allowed)
    if fallback.size:
        log.warning("%d voxels have every atlas masked; using uniform membership there", fallback.size)
    q = allowed / allowed.sum(axis=0, keepdims=True)

    obs = floor_intensities(domain.gather(image.data))
    degree = 0 if cfg.bias_degree is None else cfg.bias_degree
    bias = BiasModel(degree)
    basis = evaluate_basis(degree, meta, domain.coords)
    c = np.zeros(bias.n_basis)
    if cfg.bias_degree is not None:
        c[0] = -np.log(obs.mean())
    bias = bias.with_coeffs(c)
    i_star = obs * np.exp(c @ basis)

    floor = cfg.var_floor if cfg.var_floor is not None else default_variance_floor(i_star)
    vote = _majority_vote(atlas_labels, allowed, labels)
    mix = _initial_mixture(vote, atlas_labels, i_star, labels, cfg, floor)
    return VemState(
        cfg=replace(cfg, var_floor=floor),
        domain=domain,
        labels=labels,
        log_prior=log_prior,
        allowed=allowed,
        image=obs,
        basis=basis,
        mix=mix,
        bias=bias,
        q=q,
        fallback_voxels=fallback,
    )


# ----------------------------------------------------------------------------
# E-step, posteriors, free energy
# ----------------------------------------------------------------------------


def _update(q, log_ev, allowed, neighbors, beta, idx):
    if beta > 0:
        nb = neighbors[idx]
        padded = np.concatenate([q, np.zeros((q.shape[0], 1))], axis=1)
        nb = np.where(nb >= 0, nb, q.shape[1])
        msg = beta * padded[:, nb].sum(axis=2)
        logits = msg + log_ev[:, idx]
    else:
        logits = log_ev[:, idx].copy()
    logits = np.where(allowed[:, idx], logits, -np.inf)
    q[:, idx] = np.exp(logits - logsumexp(logits, axis=0, keepdims=True))


def meanfield_sweeps(state: VemState, sweeps: int, log_ev: np.ndarray | None = None) -> np.ndarray:
    """Run ``sweeps`` mean-field sweeps and return the new ``q``."""
    if log_ev is None:
        log_ev = state.log_evidence()
    q = state.q.copy()
    beta = state.cfg.beta
    nbrs = state.domain.neighbors
    if state.cfg.schedule == "checkerboard":
        colors = [np.flatnonzero(state.domain.color == c) for c in (0, 1)]
    for _ in range(sweeps):
        if state.cfg.schedule == "checkerboard":
            for idx in colors:
                if idx.size:
                    _update(q, log_ev, state.allowed, nbrs, beta, idx)
        else:
            # messages are built from a padded copy, so every voxel sees the old q
            _update(q, log_ev, state.allowed, nbrs, beta, np.arange(q.shape[1]))
    if not np.all(np.isfinite(q)):
        raise VemError("non-finite membership posterior", {"beta": beta})
    return q


def e_step(state: VemState, sweeps: int | None = None) -> VemState:
    sweeps = state.cfg.meanfield_sweeps_per_estep if sweeps is None else sweeps
    return replace(state, q=meanfield_sweeps(state, sweeps))


def label_posterior(state: VemState, log_joint: np.ndarray | None = None) -> np.ndarray:
    """``p_x(l) = sum_n q_x(n) pi_{n,l}(x) p(I*(x)|l) / e_n(x)``: (L, V)."""
    if log_joint is None:
        log_joint = state.log_joint()
    cond = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))  # p(l | n, x)
    post = np.einsum("nv,nlv->lv", state.q, cond)
    return post / post.sum(axis=0, keepdims=True)


def free_energy(state: VemState, log_ev: np.ndarray | None = None) -> float:
    """Mean-field evidence lower bound (see module docstring), without ``-log Z(beta)``."""
    if log_ev is None:
        log_ev = state.log_evidence()
    q = state.q
    data_term = float((q * log_ev).sum())
    pair = 0.0
    if state.cfg.beta > 0:
        e = state.domain.edges()
        pair = state.cfg.beta * float((q[:, e[:, 0]] * q[:, e[:, 1]]).sum())
    pos = q > 0
    entropy = -float((q[pos] * np.log(q[pos])).sum())
    jacobian = float(state.log_bias().sum())
    return data_term + pair + entropy + jacobian


# ----------------------------------------------------------------------------
# M-step
# ----------------------------------------------------------------------------


def m_step(state: VemState) -> tuple[VemState, dict]:
    """Mixture update followed by a guarded bias update."""
    info = {"flagged_labels": [], "bias_step": None}
    resp = label_posterior(state)
    mix, flagged = m_step_mixture(resp, state.i_star(), state.mix, var_floor=state.cfg.var_floor)
    info["flagged_labels"] = flagged
    state = replace(state, mix=mix)
    if state.cfg.bias_degree is None:
        return state, info

    current = free_energy(state)
    proposal = fit_bias(resp, state.image, mix, state.bias, state.basis)
    old = state.bias.coeffs
    step = proposal.coeffs - old
    t = 1.0
    for _ in range(state.cfg.bias_backtracks + 1):
        trial = replace(state, bias=state.bias.with_coeffs(old + t * step))
        f = free_energy(trial)
        if np.isfinite(f) and f >= current:
            info["bias_step"] = t
            return trial, info
        t *= 0.5
    info["bias_step"] = 0.0
    return state, info


# ----------------------------------------------------------------------------
# Driver
# ----------------------------------------------------------------------------


def _diagnostics(state: VemState, trace) -> dict:
    return {
        "elbo_trace": list(trace),
        "means": state.mix.means.tolist(),
        "variances": state.mix.variances.tolist(),
        "bias": state.bias.coeffs.tolist(),
        "q_finite": bool(np.all(np.isfinite(state.q))),
    }


def _abort(state: VemState, trace, message: str):
    diag = _diagnostics(state, trace)
    if state.cfg.dump_dir:
        path = Path(state.cfg.dump_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "vem_diagnostics.json").write_text(json.dumps(diag, indent=2, default=str))
    raise VemError(message, diag)


def finalize(state: VemState, trace, iterations: int, converged: bool, wallclock: float = 0.0) -> SegmentationResult:
    post = label_posterior(state)
    # argmax picks the first maximum; labels are ascending so ties go to the lower ID
    winners = np.asarray(state.labels)[np.argmax(post, axis=0)]
    map_labels = LabelVolume(state.domain.meta, state.domain.scatter(winners.astype(np.int32), fill=0))
    return SegmentationResult(
        map_labels=map_labels,
        labels=state.labels,
        label_posterior=post,
        bias=state.bias,
        params=state.mix,
        free_energy_trace=list(trace),
        q=state.q,
        domain=state.domain,
        iterations=iterations,
        converged=converged,
        wallclock=wallclock,
    )


def run_vem(
    atlases: AtlasSet,
    image: ScalarVolume,
    cfg: VemConfig | None = None,
    mask=None,
    table: LabelTable | None = None,
    cache_dir=None,
) -> SegmentationResult:
    """Alternate E-step, mixture M-step and bias M-step until the relative
    change of the free energy drops below ``cfg.tol`` or ``cfg.max_outer_iters``
    is reached."""
    cfg = cfg or VemConfig()
    t0 = time.perf_counter()
    state = initialize(atlases, image, cfg, mask=mask, table=table, cache_dir=cache_dir)
    trace = [free_energy(state)]
    if not np.isfinite(trace[0]):
        _abort(state, trace, "non-finite initial free energy")
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        state = e_step(state)
        state, _ = m_step(state)
        f = free_energy(state)
        if not np.isfinite(f):
            _abort(state, trace + [f], f"non-finite free energy at iteration {it}")
        prev = trace[-1]
        trace.append(f)
        log.debug("VEM iter %d: F=%.10g", it, f)
        if abs(f - prev) < cfg.tol * max(abs(prev), 1e-300):
            converged = True
            break
    return finalize(state, trace, it, converged, time.perf_counter() - t0)
