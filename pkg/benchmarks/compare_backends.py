"""Compiled vs pure-Python kernel throughput on the MobileNetV1 pointwise shapes.

    python benchmarks/compare_backends.py --threads 1 --repeats 5

Both backends run the same packs; outputs are checked to be bit-identical
before anything is timed.
"""

import argparse
import sys
import timeit

import numpy as np

from ubp import kernels as K
from ubp.bench import PRESETS, layer_seed
from ubp.selection import blocks_for_sparsity, score_blocks, select_abp, select_bed
from ubp.sparse_format import pack
from ubp.tensor_io import gen_activations, gen_tensor


def best_seconds(fn, repeats):
    timer = timeit.Timer(fn)
    loops, _ = timer.autorange()
    return min(timer.repeat(repeats, loops)) / loops


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--sparsity", type=float, default=0.8)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--max-channels", type=int, default=512,
                    help="skip preset shapes wider than this (the fallback is slow)")
    args = ap.parse_args(argv)

    if "cython" not in K.BACKENDS:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    cfg = K.TileConfig(threads=args.threads)
    print(f"{'shape':>16} {'kernel':>8} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for idx, (c_out, c_in, cols) in enumerate(PRESETS["mobilenet_v1"]):
        if c_out > args.max_channels:
            continue
        seed = layer_seed(0, idx)
        w = gen_tensor((c_out, c_in, 1, 1), seed, "gaussian")
        x = gen_activations(c_in, cols, seed + 1)
        s = score_blocks(w, args.n)
        m = blocks_for_sparsity(s.b, args.n, args.sparsity)
        sels = {"aligned": select_abp(s, m), "naive": select_bed(s, m)}
        sels["wros"] = sels["naive"]
        for flow, sel in sels.items():
            p = pack(w, sel, flow)
            a = K.run(p, x, cfg, backend="cython")
            b = K.run(p, x, cfg, backend="python")
            if not np.array_equal(a.output.array(), b.output.array()):
                print(f"backends disagree on {c_out}x{c_in} {flow}", file=sys.stderr)
                return 1
            fast = best_seconds(lambda: K.run(p, x, cfg, backend="cython"), args.repeats)
            slow = best_seconds(lambda: K.run(p, x, cfg, backend="python"), args.repeats)
            print(f"{f'{c_out}x{c_in}x{cols}':>16} {flow:>8} {fast * 1e3:10.3f} {slow * 1e3:10.3f} "
                  f"{slow / fast:8.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
