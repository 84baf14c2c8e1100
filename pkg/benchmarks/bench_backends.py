"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_backends.py [--particles N] [--buffer-size G] [--repeats R]

Both backends must agree bit for bit before timings are printed.
"""

import sys

import numpy as np

from soaforge import _backend
from soaforge.cli import build_config, cmd_bench_backends, make_parser, summary_table


def check_agreement(cfg):
    if _backend.native is None:
        return
    st = {k: np.ascontiguousarray(cfg.state[k], dtype=np.float64) for k in ("x", "v", "m", "h", "rho", "P")}
    g = cfg.buffer_size
    args = (st["x"], st["h"], st["x"], st["m"], st["h"], g, g)
    assert np.array_equal(_backend.native.density(*args), _backend.purepy.density(*args))
    fargs = (st["x"], st["v"], st["h"], st["rho"], st["P"], st["x"], st["v"], st["m"], st["h"], st["rho"], st["P"], g, g)
    for a, b in zip(_backend.native.force(*fargs), _backend.purepy.force(*fargs)):
        assert np.array_equal(a, b)


def main(argv=None):
    args = make_parser().parse_args(["bench", "backends"] + list(sys.argv[1:] if argv is None else argv))
    cfg = build_config(args)
    if _backend.native is None:
        print("compiled backend not built; timing the numpy fallback only")
    check_agreement(cfg)
    print(summary_table(cmd_bench_backends(cfg)), end="")


if __name__ == "__main__":
    main()
