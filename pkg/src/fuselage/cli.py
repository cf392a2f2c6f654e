"""Command-line interface: ``fuselage <subcommand> ...``.

Every subcommand prints a short human summary on stdout and writes
machine-readable files.  On failure it prints ``{"error": ..., "message": ...}``
on stderr and exits non-zero (2 for invalid arguments, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import atlas as atlas_db
from . import metrics, phantom
from .vem import VemConfig, run_vem
from .volume import read_volume, resample_isotropic, write_volume

log = logging.getLogger("fuselage")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    image: str | None = None
    mask: str | None = None
    manifest: str | None = None
    out_dir: str | None = None
    k: int | None = None
    select_by: str = "age"
    age_days: float | None = None
    beta: float = 0.5
    rho: float = 1.0
    bias_degree: int | None = 4
    components: int = 1
    seed: int = 0
    workers: int = 1
    max_iters: int = 30
    resample_mm: float = 1.0
    posteriors: bool = False

    def validate(self) -> None:
        if self.k is not None and self.k < 1:
            raise UsageError("--k must be >= 1")
        if self.select_by not in ("age", "mi"):
            raise UsageError("--select-by must be 'age' or 'mi'")
        if self.select_by == "age" and self.age_days is None:
            raise UsageError("--select-by age requires --age-days")
        if self.age_days is not None and self.age_days < 0:
            raise UsageError("--age-days must be >= 0")
        if self.beta < 0:
            raise UsageError("--beta must be >= 0")
        if not self.rho > 0:
            raise UsageError("--rho must be > 0")
        if self.bias_degree is not None and self.bias_degree < 0:
            raise UsageError("--bias-degree must be >= 0")
        if not 1 <= self.components <= 3:
            raise UsageError("--components must be 1, 2 or 3")
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        if self.max_iters < 1:
            raise UsageError("--max-iters must be >= 1")
        if not self.resample_mm > 0:
            raise UsageError("--resample-mm must be > 0")

    def vem_config(self) -> VemConfig:
        return VemConfig(
            beta=self.beta,
            rho=self.rho,
            bias_degree=self.bias_degree,
            components=self.components,
            seed=self.seed,
            workers=self.workers,
            max_outer_iters=self.max_iters,
        )


def _bias_degree(text: str):
    if text.lower() in ("none", "off"):
        return None
    return int(text)


def parse_sizes(text: str) -> list[int]:
    """``"1-5"`` or ``"1,2,5"`` or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise UsageError("--sizes is empty")
    return sorted(set(out))


def _manifest_count(path) -> int:
    try:
        return len(json.loads(Path(path).read_text())["atlases"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable manifest {path}: {exc}") from exc


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"no such file: {p}")


def _vem_flags(p: argparse.ArgumentParser):
    p.add_argument("--beta", type=float, default=0.5, help="MRF coupling (default 0.5)")
    p.add_argument("--rho", type=float, default=1.0, help="logOdds slope in 1/mm (default 1.0)")
    p.add_argument("--bias-degree", type=_bias_degree, default=4, help="bias polynomial degree, or 'none'")
    p.add_argument("--components", type=int, default=1, help="Gaussians per label (1-3)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=30)


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------


def _select(cfg: RunConfig, atlases, image):
    if cfg.select_by == "mi":
        return atlas_db.select_by_mi(atlases, image, cfg.k)
    return atlas_db.select_by_age(atlases, cfg.age_days, cfg.k)


def cmd_segment(args) -> int:
    cfg = RunConfig(
        subcommand="segment",
        image=args.image,
        mask=args.mask,
        manifest=args.manifest,
        out_dir=args.out_dir,
        k=args.k,
        select_by=args.select_by,
        age_days=args.age_days,
        beta=args.beta,
        rho=args.rho,
        bias_degree=args.bias_degree,
        components=args.components,
        seed=args.seed,
        workers=args.workers,
        max_iters=args.max_iters,
        resample_mm=args.resample_mm,
        posteriors=args.posteriors,
    )
    cfg.validate()
    _require_files(cfg.image, cfg.mask, cfg.manifest)
    n = _manifest_count(cfg.manifest)
    k = cfg.k if cfg.k is not None else n
    if k > n:
        raise UsageError(f"--k {k} exceeds the {n} atlases in the manifest")
    cfg = RunConfig(**{**asdict(cfg), "k": k})

    image = resample_isotropic(read_volume(cfg.image, kind="scalar"), cfg.resample_mm)
    mask = resample_isotropic(read_volume(cfg.mask, kind="label"), cfg.resample_mm, mode="nearest")
    atlases = atlas_db.load_manifest(cfg.manifest)
    atlases = atlas_db.AtlasSet(
        tuple(
            atlas_db.Atlas(
                a.id,
                resample_isotropic(a.intensity, cfg.resample_mm),
                resample_isotropic(a.labels, cfg.resample_mm, mode="nearest"),
                a.age_days,
                a.has_wm,
            )
            for a in atlases
        )
    )
    chosen = _select(cfg, atlases, image)
    vcfg = cfg.vem_config()
    result = run_vem(chosen, image, vcfg, mask=mask)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(result.map_labels, out / "labels.nii.gz")
    if cfg.posteriors:
        (out / "posteriors").mkdir(exist_ok=True)
        for l in result.labels:
            write_volume(result.posterior_volume(l), out / "posteriors" / f"posterior_{l}.nii.gz")
    rep = result.report(vcfg)
    rep["selected_atlases"] = chosen.ids
    rep["run_config"] = asdict(cfg)
    (out / "run_report.json").write_text(json.dumps(rep, indent=2, default=str))
    print(
        f"segmented {cfg.image}: {len(result.labels)} labels from {len(chosen)} atlases "
        f"({', '.join(chosen.ids)}); {result.iterations} iterations, F={result.free_energy_trace[-1]:.6g}"
    )
    return 0


def cmd_metrics(args) -> int:
    _require_files(args.a, args.b)
    a = read_volume(args.a, kind="label")
    b = read_volume(args.b, kind="label")
    table = atlas_db.label_table()
    rep = metrics.report(a, b, table)
    if args.labels:
        wanted = [int(x) for x in args.labels.split(",") if x.strip()]
        used = [l for l in wanted if rep.dice.get(l) is not None]
        rep.labels = [l for l in rep.labels if l in wanted]
        rep.used = used
        rep.generalized = metrics.generalized_dice(a, b, used) if used else 1.0
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".json":
            rep.to_json(out)
        else:
            rep.to_csv(out)
            rep.to_json(out.with_suffix(".json"))
    for l in rep.labels:
        d = rep.dice[l]
        print(f"{l:>4} {rep.names.get(l, ''):<28} {'absent' if d is None else f'{d:.4f}'}")
    print(f"GENERALIZED {rep.generalized:.4f}")
    return 0


def cmd_phantom(args) -> int:
    cfg = phantom.PhantomConfig(
        seed=args.seed,
        size=args.size,
        n_atlases=args.n_atlases,
        noise_sigma=args.noise,
        bias=args.bias,
        deformation=args.deform,
        no_wm_fraction=args.no_wm_fraction,
        test_age_days=args.test_age_days,
        age_growth=args.age_growth,
    )
    inst = phantom.generate(cfg)
    path = phantom.write_instance(inst, args.out_dir)
    print(f"phantom {cfg.dims} with {cfg.n_atlases} atlases written to {path}")
    return 0


def cmd_jackknife(args) -> int:
    sizes = parse_sizes(args.sizes)
    cfg = RunConfig(
        subcommand="jackknife",
        manifest=args.manifest,
        select_by=args.select_by,
        age_days=0.0,
        beta=args.beta,
        rho=args.rho,
        bias_degree=args.bias_degree,
        components=args.components,
        seed=args.seed,
        workers=args.workers,
        max_iters=args.max_iters,
    )
    cfg.validate()
    _require_files(cfg.manifest)
    n = _manifest_count(cfg.manifest)
    if min(sizes) < 1 or max(sizes) > n - 1:
        raise UsageError(f"--sizes must lie in 1..{n - 1} for a family of {n}")
    family = atlas_db.load_manifest(cfg.manifest)
    vcfg = VemConfig(**{**asdict(cfg.vem_config()), "workers": 1})
    result = phantom.jackknife(family, sizes, vcfg, select=cfg.select_by, workers=cfg.workers)
    files = result.write(args.out)
    print(f"{len(result.runs)} runs written to {files['runs']}")
    print("winning k histogram: " + ", ".join(f"k={k}: {c}" for k, c in result.winning_histogram().items()))
    return 0


def cmd_select(args) -> int:
    cfg = RunConfig(subcommand="select", manifest=args.manifest, image=args.image, k=args.k, select_by=args.select_by, age_days=args.age_days)
    cfg.validate()
    _require_files(cfg.manifest, cfg.image)
    n = _manifest_count(cfg.manifest)
    if cfg.k > n:
        raise UsageError(f"--k {cfg.k} exceeds the {n} atlases in the manifest")
    if cfg.select_by == "mi" and cfg.image is None:
        raise UsageError("--select-by mi requires --image")
    atlases = atlas_db.load_manifest(cfg.manifest)
    image = read_volume(cfg.image, kind="scalar") if cfg.image else None
    chosen = _select(cfg, atlases, image)
    doc = {"selected": chosen.ids, "ages": [a.age_days for a in chosen]}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return 0


def cmd_sharpness(args) -> int:
    _require_files(args.image)
    vol = read_volume(args.image, kind="scalar")
    score = metrics.tenengrad(vol)
    print(json.dumps({"image": args.image, "tenengrad": score}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuselage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment one image from a manifest of registered atlases")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="brain mask (nonzero = inside)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None, help="neighborhood size (default: all atlases)")
    p.add_argument("--select-by", choices=["age", "mi"], default="age")
    p.add_argument("--age-days", type=float, default=None)
    p.add_argument("--resample-mm", type=float, default=1.0)
    p.add_argument("--posteriors", action="store_true", help="also write per-label posterior volumes")
    p.add_argument("--out-dir", required=True)
    _vem_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("metrics", help="Dice and Generalized Dice between two label volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--labels", default=None, help="comma-separated label IDs (default: all table labels)")
    p.add_argument("--out", default=None, help="CSV (with JSON mirror) or .json output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("phantom", help="write a synthetic phantom instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-atlases", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--deform", type=float, default=1.0)
    p.add_argument("--no-wm-fraction", type=float, default=0.0)
    p.add_argument("--test-age-days", type=float, default=365.0)
    p.add_argument("--age-growth", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("jackknife", help="leave-one-out evaluation over a manifest's atlases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sizes", required=True, help="e.g. 1-5 or 1,3,5")
    p.add_argument("--select-by", choices=["age", "mi"], default="age")
    p.add_argument("--out", required=True)
    _vem_flags(p)
    p.set_defaults(func=cmd_jackknife)

    p = sub.add_parser("select", help="choose a training neighborhood")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--select-by", choices=["age", "mi"], default="age")
    p.add_argument("--age-days", type=float, default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("sharpness", help="Tenengrad sharpness of an image")
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_sharpness)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("UsageError", "invalid command line", 2)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
