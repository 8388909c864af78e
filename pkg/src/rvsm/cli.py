"""``rvsm`` command line: train, query, eval, bench and gen.

Exit codes: 0 success, 1 failed ``bench --assert``, 2 bad input, 3 numerical
failure.  Logs go to stderr as ``key=value`` lines; results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from . import plotting
from .data_io import (ClassDictionary, SyntheticSceneSpec, generate_scene, load_cloud, load_points,
                      save_cloud, sidecar_path)
from .errors import (DegenerateInitializationError, InvalidInputError, ModeSearchError, RvsmError,
                     TwoClassRequiredError)
from .kernel import KernelSpec
from .metrics import DEFAULT_GRID, evaluate_map
from .multiclass_map import (MapPosterior, SemanticMapModel, cloud_digest, downsample_per_class, query_map,
                             train_map)
from .sparse_bayes import TrainConfig

log = logging.getLogger("rvsm")

EXIT_OK, EXIT_ASSERT, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "RVSM_SEED"
DEFAULT_SIZES = (1000, 10000, 100000)
LINEARITY_TOL = 0.25


class NumericalFailure(RvsmError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on, loadable from one JSON file."""

    kernel: KernelSpec = KernelSpec()
    train: TrainConfig = TrainConfig()
    downsample_fraction: float = 1.0
    downsample_seed: int = 0
    paths: dict = field(default_factory=dict)
    grid_points: int = DEFAULT_GRID
    bench_sizes: tuple = DEFAULT_SIZES
    bench_repeats: int = 3
    scene: dict = field(default_factory=lambda: {"noise": 0.1, "count": 300})

    PATH_KEYS = ("cloud", "model", "queries", "truth", "out", "dictionary")
    SCENE_KEYS = ("noise", "count")

    def __post_init__(self):
        if not 0 < self.downsample_fraction <= 1:
            raise InvalidInputError("downsample_fraction must lie in (0, 1]")
        unknown = set(self.paths) - set(self.PATH_KEYS)
        if unknown:
            raise InvalidInputError(f"unknown paths keys: {sorted(unknown)}")
        unknown = set(self.scene) - set(self.SCENE_KEYS)
        if unknown:
            raise InvalidInputError(f"unknown scene keys: {sorted(unknown)}")
        if int(self.grid_points) < 1:
            raise InvalidInputError("grid_points must be positive")
        if not self.bench_sizes or any(int(s) <= 0 for s in self.bench_sizes):
            raise InvalidInputError("bench_sizes must be positive integers")
        if int(self.bench_repeats) < 1:
            raise InvalidInputError("bench_repeats must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"kernel", "train", "downsample_fraction", "downsample_seed", "paths",
                   "grid_points", "bench_sizes", "bench_repeats", "scene"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "kernel" in d:
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "bench_sizes" in d:
            d["bench_sizes"] = tuple(int(s) for s in d["bench_sizes"])
        if "scene" in d:
            d["scene"] = {"noise": 0.1, "count": 300, **d["scene"]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise InvalidInputError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then RVSM_SEED, then explicit flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    train, kernel = cfg.train, cfg.kernel
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            train = replace(train, rng_seed=int(env_seed))
        except ValueError:
            raise InvalidInputError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    if getattr(args, "seed", None) is not None:
        train = replace(train, rng_seed=args.seed)
    for flag, name in (("max_iterations", "max_iterations"), ("policy", "policy"),
                       ("convergence_tol", "convergence_tol")):
        if getattr(args, flag, None) is not None:
            train = replace(train, **{name: getattr(args, flag)})
    if getattr(args, "length_scale", None) is not None:
        kernel = replace(kernel, length_scale=args.length_scale)
    if getattr(args, "no_bias", False):
        kernel = replace(kernel, include_bias=False)
    cfg = replace(cfg, train=train, kernel=kernel)
    if getattr(args, "downsample", None) is not None:
        cfg = replace(cfg, downsample_fraction=args.downsample)
    if getattr(args, "grid_points", None) is not None:
        cfg = replace(cfg, grid_points=args.grid_points)
    if getattr(args, "sizes", None) is not None:
        cfg = replace(cfg, bench_sizes=tuple(args.sizes))
    if getattr(args, "repeats", None) is not None:
        cfg = replace(cfg, bench_repeats=args.repeats)
    scene = dict(cfg.scene)
    for key in RunConfig.SCENE_KEYS:
        if getattr(args, key, None) is not None:
            scene[key] = getattr(args, key)
    return replace(cfg, scene=scene)


def _path(args, cfg, key, flag):
    p = getattr(args, key, None) or cfg.paths.get(key)
    if not p:
        raise InvalidInputError(f"missing {flag} (or paths.{key} in the config)")
    return p


def parse_grid(spec: str) -> np.ndarray:
    """Axis-aligned grid ``xmin:xmax:step,ymin:ymax:step,zmin:zmax:step``.

    Each axis holds ``xmin + i * step`` for every ``i`` with the value not
    above ``xmax``; an axis with ``xmax < xmin`` is empty.  Rows are ordered
    with x varying slowest.
    """
    axes = []
    parts = spec.split(",")
    if len(parts) != 3:
        raise InvalidInputError(f"grid needs three axes, got {len(parts)}")
    for part in parts:
        try:
            lo, hi, step = (float(v) for v in part.split(":"))
        except ValueError:
            raise InvalidInputError(f"bad grid axis {part!r}; expected min:max:step") from None
        if not (math.isfinite(lo) and math.isfinite(hi) and math.isfinite(step) and step > 0):
            raise InvalidInputError(f"bad grid axis {part!r}; step must be positive")
        n = 0 if hi < lo else int(math.floor((hi - lo) / step + 1e-9)) + 1
        axes.append(lo + step * np.arange(n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh]) if mesh[0].size else np.zeros((0, 3))


def _kv(**items) -> str:
    return " ".join(f"{k}={v}" for k, v in items.items())


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cloud_path = _path(args, cfg, "cloud", "--cloud")
    model_out = _path(args, cfg, "out", "--out")
    dict_path = getattr(args, "dictionary", None) or cfg.paths.get("dictionary")
    dictionary = ClassDictionary.load(dict_path) if dict_path else None
    cloud = load_cloud(cloud_path, dictionary=dictionary, allow_new_classes=args.allow_new_classes)
    if len(cloud.classes) < 2:
        raise TwoClassRequiredError(f"two classes required to train; {cloud_path} has labels {cloud.classes}")
    if dictionary is None and sidecar_path(cloud_path).exists():
        dictionary = ClassDictionary.load(sidecar_path(cloud_path))
    if dictionary is None:
        dictionary = ClassDictionary.default(cloud.classes)
    elif args.allow_new_classes:
        extra = [c for c in cloud.classes if c not in dictionary.ids]
        if extra:
            dictionary = ClassDictionary(dictionary.classes + ClassDictionary.default(extra).classes)
    digest = cloud_digest(cloud)
    sample = downsample_per_class(cloud, cfg.downsample_fraction, seed=cfg.downsample_seed)
    log.info(_kv(event="train_start", points=len(cloud), sampled=len(sample), classes=len(dictionary),
                 seed=cfg.train.rng_seed, length_scale=cfg.kernel.length_scale))
    t0 = time.perf_counter()
    model = train_map(sample, dictionary, cfg.kernel, cfg.train, jobs=args.jobs, source_digest=digest)
    elapsed = time.perf_counter() - t0
    if not any(m.trained for m in model.binary_models):
        raise NumericalFailure("no class could be trained")
    model.save(model_out)
    names = {c.id: c.name for c in dictionary.classes}
    rows = [("class", "relevance_vectors", "positive", "negative", "converged")]
    for rep in model.reports:
        cid = rep["class_id"]
        rows.append((names[cid], str(rep.get("n_relevance_vectors", "-")), str(rep["n_positive"]),
                     str(rep["n_negative"]), str(rep.get("converged", "untrainable"))))
        log.info(_kv(event="class_trained", class_id=cid, **{k: v for k, v in rep.items()
                                                              if k not in ("class_id", "reason")}))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    log.info(_kv(event="train_done", model=model_out, seconds=f"{elapsed:.2f}"))
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = resolve_config(args)
    model = SemanticMapModel.load(_path(args, cfg, "model", "--model"))
    out = _path(args, cfg, "out", "--out")
    if args.grid is not None:
        queries = parse_grid(args.grid)
    else:
        queries = load_points(_path(args, cfg, "queries", "--queries or --grid"))
    post = query_map(model, queries)
    fmt = args.format or Path(out).suffix.lower().lstrip(".") or "csv"
    if fmt == "csv":
        post.to_csv(out)
    elif fmt == "ply":
        post.to_ply(out, model.dictionary)
    else:
        raise InvalidInputError(f"unknown output format {fmt!r}")
    log.info(_kv(event="query_done", queries=len(queries), out=out))
    if args.plot:
        fig = plotting.plot_posterior(post, model.dictionary, str(Path(out).with_suffix(".png")))
        log.info(_kv(event="figure", path=fig))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = SemanticMapModel.load(_path(args, cfg, "model", "--model"))
    truth = load_cloud(_path(args, cfg, "truth", "--truth"), dictionary=model.dictionary)
    out = Path(_path(args, cfg, "out", "--out"))
    if args.posterior:
        post = MapPosterior.from_csv(args.posterior)
        if post.class_ids != model.dictionary.ids:
            raise InvalidInputError(f"posterior classes {post.class_ids} differ from the model's")
    else:
        post = query_map(model, truth.points)
    report = evaluate_map(post, truth, cfg.grid_points, model.dictionary)
    report.save_json(out)
    table = report.table()
    out.with_suffix(".txt").write_text(table)
    sys.stdout.write(table)
    log.info(_kv(event="eval_done", auc=report.averages["auc"], sensitivity=report.averages["sensitivity"],
                 flagged=",".join(map(str, report.flagged)) or "none", out=str(out)))
    if not args.no_plot:
        prefix = str(out.with_suffix(""))
        for p in plotting.plot_eval_report(report, post, truth, model.dictionary, prefix):
            log.info(_kv(event="figure", path=p))
    return EXIT_OK


def bench_queries(model: SemanticMapModel, sizes, repeats=3, seed=0) -> list:
    """Per-query cost of ``query_map`` for each size.

    Queries are uniform in the bounding box of the relevance vectors.  Small
    sizes are repeated so every measurement covers about as many queries as
    the largest size; the fastest of ``repeats`` runs is kept.
    """
    rvs = [m.relevance_vectors for m in model.binary_models if len(m.relevance_vectors)]
    rv = np.vstack(rvs) if rvs else np.zeros((1, 3))
    lo, hi = rv.min(axis=0) - model.kernel.length_scale, rv.max(axis=0) + model.kernel.length_scale
    rng = np.random.default_rng(seed)
    largest = max(sizes)
    results = []
    for n in sizes:
        q = lo + (hi - lo) * rng.random((n, 3))
        inner = max(1, largest // n)
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(inner):
                query_map(model, q)
            best = min(best, (time.perf_counter() - t0) / inner)
        results.append({"n_queries": int(n), "seconds": best, "per_query": best / n})
    return results


def linearity_ok(results, tol=LINEARITY_TOL):
    per = np.array([r["per_query"] for r in results])
    med = float(np.median(per))
    return bool(np.all(np.abs(per / med - 1) <= tol)), med


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    model = SemanticMapModel.load(_path(args, cfg, "model", "--model"))
    results = bench_queries(model, cfg.bench_sizes, cfg.bench_repeats, seed=cfg.train.rng_seed)
    ok, med = linearity_ok(results)
    for r in results:
        log.info(_kv(event="bench", n_queries=r["n_queries"], seconds=f"{r['seconds']:.6f}",
                     us_per_query=f"{1e6 * r['per_query']:.3f}", ratio=f"{r['per_query'] / med:.3f}"))
        print(f"{r['n_queries']:>9d}  {r['seconds']:10.4f} s  {1e6 * r['per_query']:8.3f} us/query")
    out = getattr(args, "out", None) or cfg.paths.get("out")
    if out:
        Path(out).write_text(json.dumps({"results": results, "n_relevance_vectors": model.n_relevance_vectors,
                                         "linear_within_tolerance": ok}, indent=1) + "\n")
        if not args.no_plot:
            fig = plotting.plot_bench([r["n_queries"] for r in results], [r["per_query"] for r in results],
                                      str(Path(out).with_suffix(".png")))
            log.info(_kv(event="figure", path=fig))
    if args.assert_linear and len(results) > 1:
        log.info(_kv(event="linearity", ok=ok, tolerance=LINEARITY_TOL))
        if not ok:
            return EXIT_ASSERT
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = Path(_path(args, cfg, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSceneSpec.standard(noise=float(cfg.scene["noise"]), seed=cfg.train.rng_seed,
                                       count=int(cfg.scene["count"]))
    train, test, truth = generate_scene(spec)
    dictionary = ClassDictionary.default(sorted({b.class_id for b in spec.class_blobs}))
    ext = args.format
    for name, cloud in (("train", train), ("test", test), ("truth", truth)):
        path = out / f"{name}.{ext}"
        save_cloud(cloud, path, ext, dictionary)
        log.info(_kv(event="gen", cloud=name, points=len(cloud), path=str(path)))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _sizes(text):
    try:
        return [int(float(s)) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvsm", description="Sparse Bayesian semantic mapping of 3D point clouds.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides RVSM_SEED and the config)")

    sp = sub.add_parser("train", help="train a semantic map from a labeled cloud")
    common(sp)
    sp.add_argument("--cloud", help="labeled cloud (.csv or .ply)")
    sp.add_argument("--out", help="model JSON to write")
    sp.add_argument("--dictionary", help="class dictionary JSON")
    sp.add_argument("--allow-new-classes", action="store_true")
    sp.add_argument("--length-scale", type=float)
    sp.add_argument("--no-bias", action="store_true")
    sp.add_argument("--downsample", type=float, help="per-class keep fraction in (0, 1]")
    sp.add_argument("--max-iterations", type=int)
    sp.add_argument("--convergence-tol", type=float)
    sp.add_argument("--policy", choices=["random", "greedy"])
    sp.add_argument("--jobs", type=int, help="training threads (default: one per class)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("query", help="class posterior at query points")
    common(sp)
    sp.add_argument("--model")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--queries", help="points file (.csv with x,y,z or .ply)")
    src.add_argument("--grid", help="xmin:xmax:step,ymin:ymax:step,zmin:zmax:step")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=["csv", "ply"])
    sp.add_argument("--plot", action="store_true", help="also write a top-down label figure")
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("eval", help="per-class AUC and mean sensitivity against a labeled cloud")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--truth")
    sp.add_argument("--out", help="report JSON; the table goes next to it as .txt")
    sp.add_argument("--posterior", help="score this query output (CSV) instead of querying the model")
    sp.add_argument("--grid-points", type=int)
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time queries over a size ladder")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--sizes", type=_sizes, help="comma separated, e.g. 1e3,1e4,1e5")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--out", help="results JSON")
    sp.add_argument("--assert", dest="assert_linear", action="store_true",
                    help=f"exit 1 unless per-query cost is within {LINEARITY_TOL:.0%} of the median")
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gen", help="write the synthetic three-blob scene")
    common(sp)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--count", type=int)
    sp.add_argument("--format", choices=["csv", "ply"], default="csv")
    sp.set_defaults(func=cmd_gen)
    return p


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (ModeSearchError, DegenerateInitializationError, NumericalFailure, linalg.LinAlgError) as exc:
        log.error(_kv(event="numerical_failure", error=type(exc).__name__, message=json.dumps(str(exc))))
        return EXIT_NUMERIC
    except (RvsmError, ValueError, KeyError, OSError) as exc:
        log.error(_kv(event="input_error", error=type(exc).__name__, message=json.dumps(str(exc))))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
