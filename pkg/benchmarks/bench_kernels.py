"""Compare the compiled and numpy assembly kernels on a three-cell structure.

Usage: ``python benchmarks/bench_kernels.py [--resolution 7] [--repeat 5]``

Both backends assemble energy (mode 0), gradient (mode 1) and element Hessians
(mode 2) on the same deformed state; the script checks they agree and prints
the best-of-``repeat`` wall time of each.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from snapiga import _kernels_py
from snapiga.geometry import DesignParams
from snapiga.solver import build_model

try:
    from snapiga import _kernels as _compiled
except ImportError:
    _compiled = None

THREE_CELL = dict(L=12.21, t=1.25, h1=5.32, h2=7.24, h3=11.45, tb=(0.21, 0.23, 0.19), E=70.0)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--resolution", type=int, default=7)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    model = build_model(DesignParams(**THREE_CELL), resolution=args.resolution)
    rng = np.random.default_rng(0)
    u = model.local_u(1e-4 * rng.standard_normal(model.n_dofs), 0.01)
    active = np.ascontiguousarray(model.basis.active, dtype=np.int32)
    call = (model.dNdX, active, model.wdet, u, model.mat.mu, model.mat.lam)
    backends = {"python": _kernels_py.assemble}
    if _compiled is not None:
        backends["cython"] = _compiled.assemble
    print(f"dofs={model.n_dofs} quadrature points={model.wdet.size}")
    print(f"{'mode':<10}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for mode, name in enumerate(("energy", "gradient", "hessian")):
        outs = {b: f(*call, mode) for b, f in backends.items()}
        if not all(o[3] for o in outs.values()):
            raise SystemExit("benchmark state inverts an element")
        if len(outs) == 2:
            for a, b in list(zip(outs["python"], outs["cython"]))[:mode + 1]:
                np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * max(np.max(np.abs(a)), 1.0))
        times = {b: min(timeit.repeat(lambda f=f: f(*call, mode), number=1, repeat=args.repeat))
                 for b, f in backends.items()}
        speed = f"{times['python'] / times['cython']:>9.1f}x" if "cython" in times else ""
        print(f"{name:<10}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times.values()) + speed)


if __name__ == "__main__":
    main()
