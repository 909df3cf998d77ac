"""Sweeps over layer shapes, block sizes and sparsities, emitted as CSV rows.

Three sweeps share one :class:`SweepSpec`:

``efficacy``  kept l1 and efficacy per selection method (one row per layer, N, p, method)
``kernels``   kernel throughput and counters (one row per shape, N, p, kernel, threads)
``timing``    selection wall time as the block count grows (one row per b, N, m, method)

Synthetic weights are gaussian and seeded from ``(seed, shape index)``, so
every non-timing field is reproducible.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels as K
from .selection import (
    EfficacyUndefined, InfeasibleSelectionError, SelectionTimeout,
    blocks_for_sparsity, efficacy_from, kept_score, reference_scores, score_blocks,
    select_abp, select_bed, select_ep, select_greedy, select_optimal, select_optimal_indexset,
)
from .sparse_format import pack
from .tensor_io import WeightTensor, gen_activations, gen_tensor

# pointwise layers of MobileNetV1 at a 14x14 feature map
PRESETS = {
    "mobilenet_v1": [(64, 64, 196), (128, 128, 196), (256, 256, 196), (512, 512, 196), (1024, 1024, 196)],
}

TIMING_METHODS = {
    "greedy": select_greedy,
    "bed": select_bed,
    "optimal": select_optimal,
    "optimal-indexset": select_optimal_indexset,
}

EFFICACY_FIELDS = ["layer", "c_out", "c_in", "kh", "kw", "n", "sparsity", "m", "method",
                   "kept_score", "efficacy", "seconds", "status"]
KERNEL_FIELDS = ["c_out", "c_in", "cols", "n", "sparsity", "kernel", "threads", "nr", "blocks",
                 "repeats", "median_elapsed", "gflops", "register_copies", "epilogue_stores",
                 "column_tiles", "rel_error", "correct"]
TIMING_FIELDS = ["c_out", "c_in", "b", "n", "m", "method", "repeats", "median_seconds",
                 "min_seconds", "status"]


@dataclass
class SweepSpec:
    shapes: list = field(default_factory=list)
    block_sizes: list = field(default_factory=lambda: [4])
    sparsities: list = field(default_factory=lambda: [0.8])
    methods: list = field(default_factory=lambda: ["greedy", "bed", "optimal", "abp", "ep"])
    kernels: list = field(default_factory=lambda: ["aligned", "naive", "wros"])
    repeats: int = 5
    seed: int = 0
    threads: list = field(default_factory=lambda: [1])
    nr: int = 64
    dp_timeout: float = 60.0
    dist: str = "gaussian"
    kernel_selection: str = "bed"
    block_counts: list | None = None
    min_time: float = 0.01
    preset: str | None = None

    def __post_init__(self):
        if self.preset:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
            if not self.shapes:
                self.shapes = list(PRESETS[self.preset])
        self.shapes = [tuple(int(v) for v in s) for s in self.shapes]
        for name in ("shapes", "block_sizes", "sparsities", "methods", "kernels", "threads"):
            if not getattr(self, name):
                raise ValueError(f"sweep field {name!r} must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if any(len(s) != 3 for s in self.shapes):
            raise ValueError("shapes are (c_out, c_in, cols) triples")

    @classmethod
    def from_json(cls, path) -> SweepSpec:
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown sweep fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def layer_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synthetic_layers(spec: SweepSpec):
    for idx, (c_out, c_in, _cols) in enumerate(spec.shapes):
        w = gen_tensor((c_out, c_in, 1, 1), layer_seed(spec.seed, idx), spec.dist)
        yield f"{c_out}x{c_in}", w


def _run_method(w: WeightTensor, method: str, n: int, p: float, deadline=None):
    if method == "ep":
        return select_ep(w, p)
    s = score_blocks(w, n)
    m = blocks_for_sparsity(s.b, n, p)
    if method == "optimal":
        return select_optimal(s, m, deadline=deadline)
    return {"greedy": select_greedy, "bed": select_bed, "abp": select_abp}[method](s, m)


def sweep_efficacy(spec: SweepSpec, layers=None) -> list[dict]:
    """Kept l1 and efficacy for every (layer, N, p, method).

    ``layers`` is an optional iterable of ``(name, WeightTensor)``; by default
    synthetic layers are generated from ``spec.shapes``. Infeasible points,
    DP timeouts and degenerate layers are recorded in ``status``.
    """
    rows = []
    for name, w in (layers if layers is not None else synthetic_layers(spec)):
        for n in spec.block_sizes:
            for p in spec.sparsities:
                base = {"layer": name, "c_out": w.c_out, "c_in": w.c_in, "kh": w.kh, "kw": w.kw,
                        "n": n, "sparsity": p, "m": blocks_for_sparsity(w.c_out * w.c_in, n, p)}
                try:
                    abp, ep = reference_scores(w, n, p)
                except (InfeasibleSelectionError, ValueError) as exc:
                    abp = ep = None
                    ref_error = str(exc)
                for method in spec.methods:
                    row = dict(base, method=method, kept_score="", efficacy="", seconds="", status="ok")
                    deadline = time.perf_counter() + spec.dp_timeout if method == "optimal" else None
                    t0 = time.perf_counter()
                    try:
                        sel = _run_method(w, method, n, p, deadline)
                    except SelectionTimeout:
                        row["status"] = "timeout"
                        rows.append(row)
                        continue
                    except (InfeasibleSelectionError, ValueError) as exc:
                        row["status"] = f"infeasible: {exc}"
                        rows.append(row)
                        continue
                    row["seconds"] = time.perf_counter() - t0
                    row["kept_score"] = kept_score(w, sel)
                    if abp is None:
                        row["status"] = f"undefined: {ref_error}"
                    else:
                        try:
                            row["efficacy"] = efficacy_from(row["kept_score"], abp, ep)
                        except EfficacyUndefined:
                            row["status"] = "undefined"
                    rows.append(row)
    return rows


def _calibrate(fn, min_time: float) -> int:
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        if time.perf_counter() - t0 >= min_time or loops >= 1 << 16:
            return loops
        loops *= 2


def _interleaved_samples(fns: dict, repeats: int, min_time: float, seed: int = 0) -> dict:
    """Per-round per-call times of each callable.

    Each round times every callable once, in a shuffled order, so machine
    drift and position effects hit all of them alike; sample ``r`` of every
    callable comes from the same round.
    """
    loops = max(_calibrate(fn, min_time) for fn in fns.values())
    samples = {k: [] for k in fns}
    keys = list(fns)
    rng = np.random.default_rng(seed)
    for _ in range(repeats):
        for idx in rng.permutation(len(keys)).tolist():
            key, fn = keys[idx], fns[keys[idx]]
            t0 = time.perf_counter()
            for _ in range(loops):
                fn()
            samples[key].append((time.perf_counter() - t0) / loops)
    return samples


def paired_ratio(num: list[float], den: list[float]) -> float:
    """Median over rounds of ``den[r] / num[r]``: the throughput ratio of ``num`` to ``den``."""
    return statistics.median(d / n for n, d in zip(num, den))


def sweep_kernels(spec: SweepSpec) -> list[dict]:
    """Median throughput and counters of each kernel on BED (unaligned) or ABP (aligned) packs.

    Rows also carry ``samples``, the per-round seconds (not written to CSV),
    for paired comparisons between kernels via :func:`paired_ratio`.
    """
    rows = []
    for idx, (c_out, c_in, cols) in enumerate(spec.shapes):
        lseed = layer_seed(spec.seed, idx)
        w = gen_tensor((c_out, c_in, 1, 1), lseed, spec.dist)
        x = gen_activations(c_in, cols, lseed + 1)
        for n in spec.block_sizes:
            for p in spec.sparsities:
                s = score_blocks(w, n)
                m = blocks_for_sparsity(s.b, n, p)
                base = {"c_out": c_out, "c_in": c_in, "cols": cols, "n": n, "sparsity": p,
                        "nr": spec.nr, "repeats": spec.repeats}
                packs, refs = {}, {}
                try:
                    unaligned = _run_method(w, spec.kernel_selection, n, p)
                    aligned = select_abp(s, m)
                except (InfeasibleSelectionError, ValueError) as exc:
                    for kernel in spec.kernels:
                        rows.append(dict(base, kernel=kernel, correct=False, rel_error=f"infeasible: {exc}"))
                    continue
                for kernel in spec.kernels:
                    sel = aligned if kernel == "aligned" else unaligned
                    packs[kernel] = pack(w, sel, kernel)
                    masked = WeightTensor(*w.shape, data=w.data * sel.element_mask(w).reshape(-1))
                    refs[kernel] = K.dense_ref(masked, x)
                for threads in spec.threads:
                    cfg = K.TileConfig(nr=spec.nr, threads=threads)
                    reports = {k: K.run(pk, x, cfg) for k, pk in packs.items()}
                    samples = _interleaved_samples(
                        {k: (lambda pk=pk: K.run(pk, x, cfg)) for k, pk in packs.items()},
                        spec.repeats, spec.min_time, spec.seed)
                    medians = {k: statistics.median(v) for k, v in samples.items()}
                    for kernel, rep in reports.items():
                        err = K.relative_error(rep.output, refs[kernel])
                        rows.append(dict(
                            base, kernel=kernel, threads=threads, blocks=packs[kernel].nblocks,
                            median_elapsed=medians[kernel], gflops=rep.flops / medians[kernel] / 1e9,
                            register_copies=rep.register_copies, epilogue_stores=rep.epilogue_stores,
                            column_tiles=rep.column_tiles, rel_error=err, correct=err <= 1e-5,
                            samples=samples[kernel],
                        ))
    return rows


def sweep_selection_timing(spec: SweepSpec) -> list[dict]:
    """Median selection time per method for each block count at fixed layer size."""
    rows = []
    methods = [m for m in spec.methods if m in TIMING_METHODS]
    for idx, (c_out, c_in, _cols) in enumerate(spec.shapes):
        w = gen_tensor((c_out, c_in, 1, 1), layer_seed(spec.seed, idx), spec.dist)
        for n in spec.block_sizes:
            s = score_blocks(w, n)
            counts = spec.block_counts or [blocks_for_sparsity(s.b, n, p) for p in spec.sparsities]
            for m in counts:
                samples = {k: [] for k in methods}
                status = dict.fromkeys(methods, "ok")
                for _ in range(spec.repeats):
                    for method in methods:
                        if status[method] != "ok":
                            continue
                        kwargs = {}
                        if method.startswith("optimal"):
                            kwargs["deadline"] = time.perf_counter() + spec.dp_timeout
                        t0 = time.perf_counter()
                        try:
                            TIMING_METHODS[method](s, m, **kwargs)
                        except SelectionTimeout:
                            status[method] = "timeout"
                            continue
                        except InfeasibleSelectionError as exc:
                            status[method] = f"infeasible: {exc}"
                            continue
                        samples[method].append(time.perf_counter() - t0)
                for method in methods:
                    ok = status[method] == "ok"
                    rows.append({
                        "c_out": c_out, "c_in": c_in, "b": s.b, "n": n, "m": m, "method": method,
                        "repeats": len(samples[method]),
                        "median_seconds": statistics.median(samples[method]) if ok else "",
                        "min_seconds": min(samples[method]) if ok else "",
                        "status": status[method],
                    })
    return rows


def write_csv(rows: list[dict], path, fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


SWEEPS = {
    "efficacy": (sweep_efficacy, EFFICACY_FIELDS),
    "kernels": (sweep_kernels, KERNEL_FIELDS),
    "timing": (sweep_selection_timing, TIMING_FIELDS),
}

__all__ = ["PRESETS", "SweepSpec", "sweep_efficacy", "sweep_kernels",
           "sweep_selection_timing", "write_csv", "paired_ratio"]
