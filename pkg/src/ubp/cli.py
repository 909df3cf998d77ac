"""Command-line entry point: ``ubp gen|select|efficacy|pack|run|bench``.

Exit codes: 0 success, 1 a correctness check failed, 2 bad arguments or
unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels as K
from .bench import SWEEPS, SweepSpec, write_csv
from .selection import (
    METHODS, BlockSelection, EfficacyUndefined, ElementMask, PruningConfig,
    SelectionError, blocks_for_sparsity, efficacy_from, kept_score, reference_scores, select,
)
from .sparse_format import DATAFLOWS, PackError, densify, load_packed, pack, store_packed
from .tensor_io import (
    ActivationMatrix, TensorFormatError, WeightTensor, gen_tensor, load_tensor, parse_shape,
    store_tensor,
)

CHECK_TOL = 1e-5


class CliError(Exception):
    """Reported as ``ubp: error: ...`` with exit status 2."""


def _load_weights(path) -> WeightTensor:
    t = load_tensor(path)
    if not isinstance(t, WeightTensor):
        raise CliError(f"{path}: expected a 4-d weight tensor, got shape {t.shape}")
    return t


def _sparsity(text: str) -> float:
    try:
        p = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= p < 1:
        raise argparse.ArgumentTypeError(f"sparsity must lie in [0, 1), got {p}")
    return p


def _shape(text: str) -> tuple[int, ...]:
    try:
        return parse_shape(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_gen(args) -> int:
    shape = args.shape
    if len(shape) == 2:
        # an activation matrix; same draws as a (rows, cols, 1, 1) weight tensor
        rows, cols = shape
        t = ActivationMatrix(rows, cols, gen_tensor((rows, cols, 1, 1), args.seed, args.dist).data)
    else:
        t = gen_tensor(shape, args.seed, args.dist)
    store_tensor(t, args.out)
    return 0


def selection_to_json(sel, w: WeightTensor, method: str, n: int, sparsity: float) -> dict:
    doc = {"method": method, "n": n, "sparsity": sparsity, "c_out": w.c_out, "c_in": w.c_in,
           "kh": w.kh, "kw": w.kw, "kept_score": kept_score(w, sel)}
    if isinstance(sel, ElementMask):
        doc["m"] = blocks_for_sparsity(w.c_out * w.c_in, n, sparsity)
        doc["starts"] = []
        doc["elements"] = np.flatnonzero(sel.mask.reshape(-1)).tolist()
    else:
        doc["m"] = sel.m
        doc["starts"] = list(sel.starts)
    return doc


def selection_from_json(doc: dict) -> BlockSelection:
    if doc.get("method") == "ep":
        raise CliError("element-wise (ep) selections have no blocks to pack")
    try:
        return BlockSelection(doc["starts"], int(doc["n"]), int(doc["c_out"]), int(doc["c_in"]),
                              int(doc.get("m", len(doc["starts"]))))
    except KeyError as exc:
        raise CliError(f"selection file lacks field {exc}") from None


def cmd_select(args) -> int:
    w = _load_weights(args.input)
    sel = select(w, PruningConfig(args.block_size, args.sparsity, args.method))
    doc = selection_to_json(sel, w, args.method, args.block_size, args.sparsity)
    Path(args.out).write_text(json.dumps(doc))
    print(f"{args.method}: m={doc['m']} kept_score={doc['kept_score']:.6g}")
    return 0


def cmd_efficacy(args) -> int:
    w = _load_weights(args.input)
    abp, ep = reference_scores(w, args.block_size, args.sparsity)
    rows = []
    for method in args.methods:
        sel = select(w, PruningConfig(args.block_size, args.sparsity, method))
        score = kept_score(w, sel)
        try:
            eff = efficacy_from(score, abp, ep)
        except EfficacyUndefined:
            eff = ""
        rows.append({"method": method, "N": args.block_size, "sparsity": args.sparsity,
                     "kept_score": score, "efficacy": eff})
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=["method", "N", "sparsity", "kept_score", "efficacy"])
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_pack(args) -> int:
    w = _load_weights(args.weights)
    doc = json.loads(Path(args.selection).read_text())
    sel = selection_from_json(doc)
    if (sel.c_out, sel.c_in) != (w.c_out, w.c_in):
        raise CliError(f"selection is for {sel.c_out}x{sel.c_in}, weights are {w.c_out}x{w.c_in}")
    store_packed(pack(w, sel, args.dataflow), args.out)
    return 0


def cmd_run(args) -> int:
    p = load_packed(args.weights)
    x = load_tensor(args.input)
    if not isinstance(x, ActivationMatrix):
        raise CliError(f"{args.input}: expected a 2-d activation matrix, got shape {x.shape}")
    rep = K.run(p, x, K.TileConfig(nr=args.nr, threads=args.threads))
    doc = {"register_copies": rep.register_copies, "epilogue_stores": rep.epilogue_stores,
           "elapsed": rep.elapsed, "gflops": rep.gflops}
    status = 0
    if args.check_dense:
        err = K.relative_error(rep.output, K.dense_ref(densify(p), x))
        doc["rel_error"] = err
        doc["dense_check"] = err <= CHECK_TOL
        status = 0 if doc["dense_check"] else 1
    if args.out:
        store_tensor(rep.output, args.out)
    print(json.dumps(doc))
    return status


def cmd_bench(args) -> int:
    spec = SweepSpec.from_json(args.spec)
    fn, fieldnames = SWEEPS[args.sweep]
    rows = fn(spec)
    write_csv(rows, args.csv, fieldnames)
    bad = [r for r in rows if r.get("correct") is False]
    for r in bad:
        print(f"correctness failure: {r.get('kernel')} {r.get('c_out')}x{r.get('c_in')} "
              f"N={r.get('n')} p={r.get('sparsity')}: rel_error={r.get('rel_error')}", file=sys.stderr)
    print(f"{len(rows)} rows -> {args.csv}")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ubp", description="Unaligned 1xN block pruning toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a seeded random tensor")
    g.add_argument("--shape", type=_shape, required=True, help="CxCxHxW weights, or ROWSxCOLS activations")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dist", choices=["uniform", "gaussian"], default="gaussian")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("select", help="choose blocks (or elements, for ep)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--method", choices=METHODS, default="bed")
    s.add_argument("--block-size", type=int, required=True)
    s.add_argument("--sparsity", type=_sparsity, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("efficacy", help="kept l1 and efficacy per method")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--block-size", type=int, required=True)
    e.add_argument("--sparsity", type=_sparsity, required=True)
    e.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    e.add_argument("--csv", help="output file (default: stdout)")
    e.set_defaults(func=cmd_efficacy)

    pk = sub.add_parser("pack", help="pack selected blocks for a kernel dataflow")
    pk.add_argument("--weights", required=True)
    pk.add_argument("--selection", required=True)
    pk.add_argument("--dataflow", choices=DATAFLOWS, required=True)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=cmd_pack)

    r = sub.add_parser("run", help="multiply a packed weight by an activation matrix")
    r.add_argument("--weights", required=True, help=".ubps pack")
    r.add_argument("--input", required=True, help=".ubpt activation matrix")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--nr", type=int, default=K.TileConfig().nr, help="tile width in columns")
    r.add_argument("--check-dense", action="store_true",
                   help=f"compare with the dense product; exit 1 above {CHECK_TOL:g} relative error")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a sweep and write CSV")
    b.add_argument("sweep", choices=sorted(SWEEPS))
    b.add_argument("--spec", required=True, help="JSON object with SweepSpec fields")
    b.add_argument("--csv", required=True)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, TensorFormatError, PackError, SelectionError, K.KernelError,
            OSError, ValueError) as exc:
        print(f"ubp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
