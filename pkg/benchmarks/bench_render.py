"""Time the compiled rasteriser against the NumPy fallback on one synthetic view.

    python benchmarks/bench_render.py [--size 128] [--density 750] [--repeat 3]
"""
import argparse
import time

from planesplat.render import available, render
from planesplat.synth import SynthConfig, generate_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--density", type=float, default=750.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    scene = generate_scene(SynthConfig(image_size=args.size, gaussians_per_m2=args.density, n_views=12))
    view = scene.views[0]
    cov3d = scene.covariances()
    print(f"{len(scene)} primitives, {args.size}x{args.size} pixels")
    results = {}
    for backend in available():
        run = lambda: render(scene, view, retain_weights=True, cov3d=cov3d, backend=backend)
        run()  # warm caches
        results[backend] = best_of(run, args.repeat)
        print(f"{backend:>9}: {results[backend] * 1e3:8.1f} ms")
    if {"compiled", "python"} <= set(results):
        print(f"  speedup: {results['python'] / results['compiled']:.1f}x")


if __name__ == "__main__":
    main()
