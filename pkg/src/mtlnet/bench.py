"""Analytic cost model and wall-clock throughput of the network."""
from __future__ import annotations

import contextlib
import json
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from . import postproc as P
from .tensor import Tensor


@dataclass
class LayerCost:
    name: str
    kind: str
    out_shape: tuple
    macs: int
    params: int
    activation_bytes: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)
    total_macs: int = 0
    total_params: int = 0
    total_activation_bytes: int = 0
    # measured part
    forward_ms: Optional[float] = None
    postproc_ms: Optional[float] = None
    frame_ms: Optional[float] = None  # median of forward + postproc per run
    fps: Optional[float] = None
    runs: int = 0
    warmup: int = 0
    threads: Optional[int] = None
    seg_pixels_processed: Optional[int] = None
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["layers"] = [{**asdict(l), "out_shape": list(l.out_shape)} for l in self.layers]
        return d

    def table(self) -> str:
        lines = [f"{'layer':<22}{'kind':<8}{'output':<22}{'MACs':>16}{'params':>12}"]
        for l in self.layers:
            lines.append(f"{l.name:<22}{l.kind:<8}{'x'.join(map(str, l.out_shape)):<22}{l.macs:>16,}{l.params:>12,}")
        lines.append(f"{'total':<52}{self.total_macs:>16,}{self.total_params:>12,}")
        if self.fps is not None:
            lines.append(f"forward {self.forward_ms:.2f} ms, postproc {self.postproc_ms:.2f} ms, "
                         f"{self.fps:.2f} fps (median of {self.runs})")
        return "\n".join(lines)


def count_macs(spec: M.ModelSpec, batch: int = 1, bytes_per_value: int = 4) -> CostReport:
    """Per-layer multiply-accumulates from the layer table.

    conv: N*O*H'*W'*C*kh*kw. Transposed conv: N*C*H*W*O*kh*kw (every input
    pixel scatters a full kernel). Batch-norm rows carry parameters only.
    """
    h, w = spec.input_size
    rep = CostReport()
    for layer in M.layer_table(spec):
        params = int(sum(int(np.prod(s)) for n, s in layer.param_shapes().items() if M.is_trainable(n)))
        hi, wi = h // layer.in_stride, w // layer.in_stride
        if layer.kind == "conv":
            ho, wo = layer.conv_spec.output_hw(hi, wi)
            macs = batch * layer.out_ch * ho * wo * layer.in_ch * layer.kernel ** 2
        elif layer.kind == "deconv":
            ho, wo = hi * layer.stride, wi * layer.stride
            macs = batch * layer.in_ch * hi * wi * layer.out_ch * layer.kernel ** 2
        else:
            ho, wo = hi, wi
            macs = 0
        shape = (batch, layer.out_ch, ho, wo)
        rep.layers.append(LayerCost(layer.name, layer.kind, shape, int(macs), params,
                                    int(np.prod(shape)) * bytes_per_value))
    rep.total_macs = sum(l.macs for l in rep.layers)
    rep.total_params = sum(l.params for l in rep.layers)
    rep.total_activation_bytes = sum(l.activation_bytes for l in rep.layers)
    return rep


def measure_fps(spec: M.ModelSpec, runs: int = 10, warmup: int = 2, seed: int = 0,
                horizon_row: Optional[int] = None, threads: Optional[int] = None,
                params: Optional[M.ModelParams] = None) -> CostReport:
    """Median wall-clock of forward and post-processing on one random frame."""
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    rep = count_macs(spec)
    params = params or M.build(spec, seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    x = Tensor(rng.random((1, 3) + spec.input_size, dtype=np.float32))

    def one():
        t0 = time.perf_counter()
        out = M.forward(params, spec, x)
        t1 = time.perf_counter()
        if out.seg is not None:
            P.seg_argmax(out.seg, horizon_row)
        if out.det is not None:
            P.postprocess(out.det, spec.anchors, spec.input_size, len(spec.det_classes))
        t2 = time.perf_counter()
        return (t1 - t0) * 1e3, (t2 - t1) * 1e3

    ctx = _thread_limit(threads)
    with ctx:
        for _ in range(warmup):
            one()
        samples = [one() for _ in range(runs)]
    fwd = statistics.median(s[0] for s in samples)
    post = statistics.median(s[1] for s in samples)
    rep.forward_ms, rep.postproc_ms = fwd, post
    rep.frame_ms = statistics.median(s[0] + s[1] for s in samples)
    rep.fps = 1000.0 / rep.frame_ms
    rep.runs, rep.warmup, rep.threads = runs, warmup, threads
    h, w = spec.input_size
    rep.seg_pixels_processed = (h - (horizon_row or 0)) * w if "seg" in spec.heads else 0
    if runs == 1:
        msg = "single timing run: no variance estimate"
        rep.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return rep


def _thread_limit(threads: Optional[int]):
    if threads is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def write_cost(rep: CostReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(rep.to_json(), fh, indent=2, sort_keys=True)
