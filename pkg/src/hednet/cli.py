"""Batch command-line surface.

Exit codes: 0 ok, 2 I/O error, 3 format error, 4 config/weight mismatch,
5 check failure. Human-readable output goes to stdout, diagnostics to
stderr, reports are JSON files.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from .core import sparsity
from .errors import ConfigError, FormatError, HednetError
from .fileio import (load_config, read_points, read_weights, tensor_digest,
                     write_sparse_tensor, write_weights)
from .gradcheck import LAYERS, run_gradchecks
from .network import (check_weights, hednet_forward, init_weights,
                      voxelize_dynamic)

EXIT_OK = 0
EXIT_IO = 2
EXIT_FORMAT = 3
EXIT_CONFIG = 4
EXIT_CHECK = 5

GRADCHECK_TOL = 1e-5


def _precision_dtype(name: str):
    return np.float64 if name == "f64" else np.float32


def cmd_voxelize(args) -> int:
    cfg = load_config(args.config)
    points = read_points(args.input)
    stats: dict = {}
    t = voxelize_dynamic(points, cfg.grid, cfg.dimensionality,
                         dtype=np.float32, stats=stats)
    write_sparse_tensor(args.output, t)
    print(f"points: {stats.get('points_in', 0)}")
    print(f"voxels: {t.num_active}")
    print(f"sparsity: {sparsity(t):.6f}")
    if stats.get("dropped_nonfinite"):
        print(f"dropped non-finite points: {stats['dropped_nonfinite']}",
              file=sys.stderr)
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = load_config(args.config)
    weights = read_weights(args.weights)
    check_weights(cfg, weights)
    points = read_points(args.input)
    trace: list = []
    start = time.perf_counter()
    out = hednet_forward(points, cfg, weights,
                         precision=_precision_dtype(args.precision),
                         trace=trace)
    total = time.perf_counter() - start
    digest = tensor_digest(out)
    if args.output:
        np.save(args.output, out)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump({"layers": trace, "total_seconds": total,
                       "output_shape": list(out.shape), "digest": digest},
                      f, indent=2)
            f.write("\n")
    print(f"output shape: {tuple(out.shape)}")
    print(f"digest: {digest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    layers = list(LAYERS) if args.layer == "all" else [args.layer]
    results = run_gradchecks(layers, args.seed, d=cfg.dimensionality)
    worst = max(results, key=lambda r: r.max_rel_err)
    for r in results:
        line = f"{r.layer}: max relative error {r.max_rel_err:.3e}"
        if r.skipped:
            line += f" (skipped {r.skipped} kink-adjacent components)"
        print(line)
    if worst.max_rel_err >= GRADCHECK_TOL:
        print(f"FAIL: {worst.layer} {worst.worst_component} "
              f"rel err {worst.max_rel_err:.3e} >= {GRADCHECK_TOL:g}",
              file=sys.stderr)
        return EXIT_CHECK
    print("gradcheck passed")
    return EXIT_OK


def _synthetic_cloud(cfg, density: float, seed: int) -> np.ndarray:
    """One point per sampled voxel cell, at its center."""
    rng = np.random.default_rng(seed)
    dims = cfg.grid.grid_dims()
    total = int(np.prod(dims))
    n = max(0, int(round(density * total)))
    if n == 0:
        return np.empty((0, 3 + cfg.point_features))
    cells = rng.integers(0, total, size=n)
    v = np.column_stack([cells % dims[0], (cells // dims[0]) % dims[1],
                         cells // (dims[0] * dims[1])])
    lo = np.asarray(cfg.grid.range_min)
    size = np.asarray(cfg.grid.voxel_size)
    xyz = lo + (v + 0.5) * size
    extras = rng.random((n, cfg.point_features))
    return np.concatenate([xyz, extras], axis=1)


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    weights = read_weights(args.weights)
    check_weights(cfg, weights)
    points = _synthetic_cloud(cfg, args.density, args.seed)
    runs = []
    digests = []
    totals = []
    for _ in range(args.repeats):
        trace: list = []
        start = time.perf_counter()
        out = hednet_forward(points, cfg, weights,
                             precision=_precision_dtype(args.precision),
                             trace=trace)
        totals.append(time.perf_counter() - start)
        digests.append(tensor_digest(out))
        runs.append(trace)
    layers = []
    for i, entry in enumerate(runs[0]):
        times = [run[i]["seconds"] for run in runs]
        layers.append({"name": entry["name"], "active": entry["active"],
                       "sparsity": entry["sparsity"],
                       "seconds_median": statistics.median(times),
                       "seconds_min": min(times)})
    report = {"repeats": args.repeats, "density": args.density,
              "layers": layers,
              "total_seconds_median": statistics.median(totals),
              "total_seconds_min": min(totals),
              "digest": digests[0],
              "digests_identical": len(set(digests)) == 1}
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    for layer in layers:
        print(f"{layer['name']:<20} active={layer['active']:<8} "
              f"median={layer['seconds_median'] * 1e3:8.2f} ms "
              f"min={layer['seconds_min'] * 1e3:8.2f} ms")
    print(f"total median {report['total_seconds_median'] * 1e3:.2f} ms over "
          f"{args.repeats} runs; digests identical: "
          f"{report['digests_identical']}")
    if not report["digests_identical"]:
        print("FAIL: digests differ across repeats", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_init_weights(args) -> int:
    cfg = load_config(args.config)
    weights = init_weights(cfg, args.seed)
    write_weights(args.output, weights)
    print(f"wrote {len(weights)} records to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hednet",
        description="Sparse encoder-decoder network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, weights=False, output=False, report=False,
               precision=False):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="accepted for interface stability; results are "
                            "bitwise independent of this value")
        if weights:
            p.add_argument("--weights", required=True)
        if output:
            p.add_argument("--output", required=True)
        if report:
            p.add_argument("--report", default=None)
        if precision:
            p.add_argument("--precision", choices=("f32", "f64"),
                           default="f64")

    p = sub.add_parser("voxelize", help="voxelize a point cloud file")
    common(p, output=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("forward", help="run a full forward pass")
    common(p, weights=True, report=True, precision=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference backward checks")
    common(p)
    p.add_argument("--layer", choices=list(LAYERS) + ["all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="timed forward passes on random input")
    common(p, weights=True, report=True, precision=True)
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-weights", help="write seeded random weights")
    common(p, output=True)
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except HednetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
