"""Benchmark the compiled kernel lane against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times the four hot kernels on representative workloads (sizes taken from the
default pipeline configuration) and prints per-kernel speedups, plus one
end-to-end registration timing per lane.
"""

import argparse
import importlib
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cmha._kernels import _fallback  # noqa: E402

try:
    from cmha._kernels import _core
except ImportError:
    _core = None


def time_call(fn, *args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def workloads(rng):
    coarse_scores = np.exp(rng.normal(size=(33, 33)))
    patch_scores = [np.exp(rng.normal(size=(12, 12))) for _ in range(64)]
    coords = rng.normal(size=(32, 3))
    dist = np.linalg.norm(coords[:, None] - coords[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :31].astype(np.int64)
    mats = [rng.normal(size=(3, 3)) for _ in range(64)]
    rot = np.stack([np.eye(3)] * 32)
    trs = rng.normal(scale=0.01, size=(32, 3))
    pts = rng.normal(size=(400, 3))
    return {
        "sinkhorn 33x33 L=50": lambda lane: lane.sinkhorn_core(coarse_scores, 50),
        "sinkhorn 64 patches 12x12 L=50": lambda lane: [
            lane.sinkhorn_core(s, 50) for s in patch_scores
        ],
        "triplet angles n=32 k=3": lambda lane: lane.triplet_angles(coords, order, 3),
        "jacobi svd3 x64": lambda lane: [lane.jacobi_svd3(m) for m in mats],
        "inlier count 32x400": lambda lane: lane.count_inliers_batch(
            rot, trs, pts, pts, 0.05
        ),
    }


def bench_pipeline(repeats):
    from cmha.geometry import PointCloud
    from cmha.pipeline import PipelineConfig, register_pair
    from cmha.synth import SceneConfig, generate_scene

    scene = generate_scene(SceneConfig(seed=0, overlap_fraction=0.5))
    src = PointCloud(scene.src.points, scene.src.features)
    tgt = PointCloud(scene.tgt.points, scene.tgt.features)
    cfg = PipelineConfig()
    return time_call(lambda: register_pair(src, tgt, cfg), repeats=repeats)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    loads = workloads(rng)

    print(f"{'kernel':35s} {'fallback':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, call in loads.items():
        t_fb = time_call(call, _fallback, repeats=args.repeats)
        if _core is None:
            print(f"{name:35s} {t_fb * 1e3:9.2f}ms {'n/a':>10s}")
            continue
        t_c = time_call(call, _core, repeats=args.repeats)
        print(
            f"{name:35s} {t_fb * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms {t_fb / t_c:7.1f}x"
        )

    # end-to-end pipeline per lane; lane choice is fixed at import, so the
    # fallback pass runs in a fresh interpreter
    t_here = bench_pipeline(args.repeats)
    lane = "compiled" if _core is not None and not os.environ.get("CMHA_NO_EXT") else "fallback"
    print(f"\nregister_pair (512 pts, default config), {lane} lane: {t_here * 1e3:.1f}ms")
    if lane == "compiled":
        import subprocess

        code = (
            "import sys; sys.path.insert(0, 'src'); "
            "from benchmarks.bench_kernels import bench_pipeline; "
            f"print(bench_pipeline({args.repeats}))"
        )
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True,
            text=True,
            env={**os.environ, "CMHA_NO_EXT": "1", "PYTHONPATH": "."},
            cwd=os.path.join(os.path.dirname(__file__), ".."),
        )
        if out.returncode == 0:
            t_fb = float(out.stdout.strip().splitlines()[-1])
            print(f"register_pair (512 pts, default config), fallback lane: {t_fb * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
