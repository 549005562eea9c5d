"""Time the compiled kernels against the numpy fallback on device meshes.

    python3 benchmarks/bench_kernels.py [--sizes 5 2.5 1.25 0.625] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from ddpmlmc import kernels
from ddpmlmc.mesh import DeviceGeometry, build_device_mesh


def cases(mesh, rng):
    p, t = mesh.vertices, mesh.triangles
    coef = rng.uniform(1.0, 80.0, mesh.n_triangles)
    psi = rng.normal(0.0, 3.0, mesh.n_vertices)
    query = np.column_stack([rng.uniform(0, mesh.xs[-1], 2000), rng.uniform(0, mesh.ys[-1], 2000)])
    cents = p[t].mean(axis=1)
    centers = query[:36]
    x = rng.normal(0.0, 20.0, mesh.n_triangles)
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
    p, t, coef, psi, query, cents, centers = map(f64, (p, t, coef, psi, query, cents, centers))
    t = i64(t)
    xs, ys = f64(mesh.xs), f64(mesh.ys)
    return {
        "stiffness_triplets": lambda impl: impl.stiffness_triplets(p, t, coef),
        "sg_triplets": lambda impl: impl.sg_triplets(p, t, psi, coef),
        "bernoulli": lambda impl: impl.bernoulli(x),
        "locate": lambda impl: impl.locate(xs, ys, p, t, query),
        "disc_members": lambda impl: impl.disc_members(cents, centers, 1.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=float, nargs="+", default=[5.0, 2.5, 1.25, 0.625])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'h':>7}{'triangles':>11}" + "".join(f"{k + ' ms':>12}" for k in impls)
          + ("  speedup" if len(impls) > 1 else ""))
    for h in args.sizes:
        mesh = build_device_mesh(DeviceGeometry(), h)
        for name, fn in cases(mesh, rng).items():
            ms = {}
            for key, impl in impls.items():
                fn(impl)  # warm-up
                ms[key] = 1e3 * min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            line = f"{name:<20}{h:>7g}{mesh.n_triangles:>11}" + "".join(f"{v:>12.3f}" for v in ms.values())
            if len(ms) > 1:
                line += f"  {ms['python'] / ms['cython']:>6.1f}x"
            print(line)


if __name__ == "__main__":
    main()
