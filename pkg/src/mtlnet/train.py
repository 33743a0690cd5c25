"""ADAM, the training loop, and the single-task vs multi-task study harness."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import loss as L
from . import metrics as Mx
from . import model as M
from . import postproc as P
from . import tensor as T
from .data import Dataset, SceneConfig, XorShift64Star, boxes_to_corners, sample_key
from .tensor import Tensor

log = logging.getLogger(__name__)

CONFIG_VERSION = 1

# column name -> (heads, w_seg, w_det)
PRESETS = {
    "STL_Seg": (("seg",), 1.0, 0.0),
    "STL_Det": (("det",), 0.0, 1.0),
    "MTL": (("seg", "det"), 1.0, 1.0),
    "MTL_10": (("seg", "det"), 10.0, 1.0),
    "MTL_100": (("seg", "det"), 100.0, 1.0),
}
COLUMN_LABELS = dict(zip(PRESETS, Mx.STUDY_COLUMNS))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer configuration")


@dataclass(frozen=True)
class DetConfig:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    score_thresh: float = 0.01
    nms_iou: float = 0.45
    ap_iou: float = 0.5


@dataclass
class ExperimentConfig:
    name: str = "custom"
    model: M.ModelSpec = field(default_factory=M.ModelSpec)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train_data: object = None  # dataset dir, or {"synthetic": SceneConfig json, "count": n, "start": i}
    eval_data: object = None
    eval_every: int = 0
    model_seed: Optional[int] = None  # defaults to optimizer.seed
    horizon_row: Optional[int] = None  # restrict seg loss/metrics to rows below
    det: DetConfig = field(default_factory=DetConfig)
    dtype: str = "f32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.name in PRESETS:
            heads, ws, wd = PRESETS[self.name]
            if self.model.heads != heads or (self.weights.w_seg, self.weights.w_det) != (ws, wd):
                raise ValueError(f"{self.name} requires heads={heads} and weights=({ws}, {wd})")
        elif self.name != "custom":
            raise ValueError(f"unknown experiment name {self.name!r}")
        if "seg" not in self.model.heads and self.weights.w_seg:
            raise ValueError("w_seg > 0 without a segmentation head")
        if "det" not in self.model.heads and self.weights.w_det:
            raise ValueError("w_det > 0 without a detection head")

    @classmethod
    def preset(cls, name: str, model: M.ModelSpec, **kw) -> "ExperimentConfig":
        heads, ws, wd = PRESETS[name]
        return cls(name=name, model=model.with_(heads=heads), weights=L.LossWeights(ws, wd), **kw)

    def to_json(self) -> dict:
        return {"version": CONFIG_VERSION, "name": self.name, "model": self.model.to_json(),
                "weights": asdict(self.weights), "optimizer": asdict(self.optimizer),
                "train_data": self.train_data, "eval_data": self.eval_data, "eval_every": self.eval_every,
                "model_seed": self.model_seed, "horizon_row": self.horizon_row, "det": asdict(self.det),
                "dtype": self.dtype}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported experiment config version {d.get('version')}")
        name = d.get("name", "custom")
        model, weights = dict(d.get("model", {})), d.get("weights")
        if name in PRESETS:
            # a preset name supplies whatever the file leaves out
            heads, ws, wd = PRESETS[name]
            model.setdefault("heads", list(heads))
            weights = weights if weights is not None else {"w_seg": ws, "w_det": wd}
        return cls(name=name, model=M.ModelSpec.from_json(model),
                   weights=L.LossWeights(**(weights or {})),
                   optimizer=OptimizerConfig(**d.get("optimizer", {})),
                   train_data=d.get("train_data"), eval_data=d.get("eval_data"),
                   eval_every=int(d.get("eval_every", 0)), model_seed=d.get("model_seed"),
                   horizon_row=d.get("horizon_row"), det=DetConfig(**d.get("det", {})),
                   dtype=d.get("dtype", "f32"))


def resolve_dataset(src) -> Optional[Dataset]:
    if src is None or isinstance(src, Dataset):
        return src
    if isinstance(src, dict) and "synthetic" in src:
        cfg = SceneConfig.from_json(src["synthetic"])
        return Dataset.synthetic(cfg, int(src["count"]), int(src.get("start", 0)))
    return Dataset.load(src)


# --------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: M.ModelParams, grads: dict, state: AdamState, cfg: OptimizerConfig) -> tuple:
    """One bias-corrected ADAM update of every parameter named in ``grads``.

    Parameters are replaced by new tensors (never written in place).
    """
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDiverged(f"non-finite gradient in {bad[:5]} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        upd = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        params.tensors[name] = Tensor((p.data - upd).astype(p.dtype, copy=False), requires_grad=True)
    return params, state


# --------------------------------------------------------------------------
# losses on a batch


@dataclass
class StepLosses:
    seg: Optional[Tensor]
    det: Optional[Tensor]
    total: Tensor
    bn_updates: dict


def batch_losses(params: M.ModelParams, exp: ExperimentConfig, imgs: np.ndarray, labels: np.ndarray,
                 boxes: Sequence, mode: str = "train") -> StepLosses:
    spec = exp.model
    dt = T.DTYPES[exp.dtype]
    upd: dict = {}
    out = M.forward(params, spec, Tensor(imgs.astype(dt, copy=False)), mode, upd)
    l_seg = l_det = None
    if out.seg is not None:
        valid = None
        if exp.horizon_row:
            valid = np.broadcast_to(P.horizon_mask(*spec.input_size, exp.horizon_row), labels.shape)
        l_seg = L.seg_loss(out.seg, labels, valid)
    if out.det is not None:
        tg = L.assign_targets([L.DetTargets(list(b)) for b in boxes], spec.grid, spec.anchors,
                              len(spec.det_classes), dtype=dt)
        l_det = L.det_loss(out.det, tg, len(spec.det_classes), exp.det.lambda_coord, exp.det.lambda_noobj)
    total = L.mtl_loss(l_seg, l_det, exp.weights)
    return StepLosses(l_seg, l_det, total, upd)


def encoder_gradients(params: M.ModelParams, exp: ExperimentConfig, imgs, labels, boxes) -> dict:
    """d(total)/d(encoder params) for one batch, without touching optimizer state."""
    params.zero_grad()
    sl = batch_losses(params, exp, imgs, labels, boxes)
    T.backward(sl.total)
    out = {n: params[n].grad.copy() for n in params.trainable() if n.startswith("enc.") and params[n].grad is not None}
    params.zero_grad()
    return out


# --------------------------------------------------------------------------
# evaluation


def evaluate(params: M.ModelParams, exp: ExperimentConfig, ds: Dataset, batch_size: int = 16) -> dict:
    """Seg IoU and det AP on a dataset, batch-norm in eval mode."""
    spec = exp.model
    dt = T.DTYPES[exp.dtype]
    cm = Mx.ConfusionMatrix(len(spec.seg_classes))
    dets, gts = [], {}
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(len(ds), start + batch_size)))
        imgs, labels, boxes = ds.batch(idx)
        out = M.forward(params, spec, Tensor(imgs.astype(dt, copy=False)), "eval")
        if out.seg is not None:
            for i, mask in zip(idx, P.seg_argmax(out.seg, exp.horizon_row)):
                cm = Mx.accumulate_confusion(mask, ds[i].seg_labels, cm)
        if out.det is not None:
            per_img = P.postprocess(out.det, spec.anchors, spec.input_size, len(spec.det_classes),
                                    exp.det.nms_iou, exp.det.score_thresh)
            for i, d in zip(idx, per_img):
                sid = ds[i].image_id
                dets += [(sid, x) for x in d]
                gts[sid] = boxes_to_corners(ds[i].boxes, spec.input_size)
    res: dict = {}
    if "seg" in spec.heads:
        res["seg_iou"], res["miou"] = Mx.seg_iou(cm)
    if "det" in spec.heads:
        res["det_ap"], res["map"] = Mx.det_ap(dets, gts, len(spec.det_classes), exp.det.ap_iou)
    return res


# --------------------------------------------------------------------------
# training loop


class BatchStream:
    """Endless keyed shuffle: epoch e uses permutation(seed, e)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs, self.seed = n, batch_size, seed
        self.epoch, self.pos, self.order = -1, n, []

    def next(self) -> list:
        out = []
        while len(out) < self.bs:
            if self.pos >= self.n:
                self.epoch += 1
                self.order = XorShift64Star(sample_key(self.seed, self.epoch), stream=2).permutation(self.n)
                self.pos = 0
            take = min(self.bs - len(out), self.n - self.pos)
            out += self.order[self.pos:self.pos + take]
            self.pos += take
        return out


@dataclass
class TrainResult:
    params: M.ModelParams
    loss_log: list
    eval_log: list
    final_eval: Optional[dict] = None
    seconds: float = 0.0


LOSS_FIELDS = ("step", "L_seg", "L_det", "L_total", "w_seg", "w_det")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(exp: ExperimentConfig, out_dir=None, train_set: Optional[Dataset] = None,
          eval_set: Optional[Dataset] = None, progress: bool = False) -> TrainResult:
    """Train one experiment. Deterministic in (config, seeds)."""
    t0 = time.perf_counter()
    spec, oc = exp.model, exp.optimizer
    train_set = train_set or resolve_dataset(exp.train_data)
    eval_set = eval_set or resolve_dataset(exp.eval_data)
    if train_set is None or len(train_set) == 0:
        raise ValueError("training set is empty or missing")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = M.build(spec, oc.seed if exp.model_seed is None else exp.model_seed, exp.dtype)
    state = AdamState()
    stream = BatchStream(len(train_set), oc.batch_size, oc.seed)
    loss_log, eval_log = [], []
    for step in range(1, oc.steps + 1):
        imgs, labels, boxes = train_set.batch(stream.next())
        params.zero_grad()
        try:
            sl = batch_losses(params, exp, imgs, labels, boxes)
            if not math.isfinite(sl.total.item()):
                raise TrainingDiverged(f"loss is {sl.total.item()} at step {step}")
            T.backward(sl.total)
            grads = {n: params[n].grad for n in params.trainable() if params[n].grad is not None}
            adam_step(params, grads, state, oc)
        except (TrainingDiverged, T.NonFiniteError) as e:
            if out is not None:
                M.save_checkpoint(out / "last_good.mtlw", params, spec)
            raise TrainingDiverged(f"step {step}: {e}") from e
        params.apply_bn_updates(sl.bn_updates)
        params.zero_grad()
        row = (step, sl.seg.item() if sl.seg is not None else None,
               sl.det.item() if sl.det is not None else None, sl.total.item(),
               exp.weights.w_seg, exp.weights.w_det)
        loss_log.append(row)
        if progress and (step % 50 == 0 or step == 1):
            log.info("%s step %d L_total=%.4f", exp.name, step, row[3])
        if exp.eval_every and eval_set is not None and step % exp.eval_every == 0:
            eval_log.append({"step": step, **evaluate(params, exp, eval_set)})

    final = evaluate(params, exp, eval_set) if eval_set is not None else None
    res = TrainResult(params, loss_log, eval_log, final, time.perf_counter() - t0)
    if out is not None:
        write_outputs(out, exp, res)
    return res


def write_outputs(out: Path, exp: ExperimentConfig, res: TrainResult) -> None:
    with open(out / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOSS_FIELDS)
        for r in res.loss_log:
            wr.writerow([r[0]] + [_fmt(v) for v in r[1:]])
    with open(out / "eval.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("step", "miou", "map"))
        for e in res.eval_log:
            wr.writerow((e["step"], _fmt(e.get("miou")), _fmt(e.get("map"))))
    M.save_checkpoint(out / "final.mtlw", res.params, exp.model)
    (out / "config.json").write_text(json.dumps(exp.to_json(), indent=2, sort_keys=True) + "\n")
    if res.final_eval is not None:
        (out / "final_eval.json").write_text(json.dumps(res.final_eval, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# study


@dataclass
class StudyConfig:
    model: M.ModelSpec
    optimizer: OptimizerConfig
    train_data: object
    eval_data: object
    seeds: tuple = (0, 1, 2)
    columns: tuple = tuple(PRESETS)
    det: DetConfig = field(default_factory=DetConfig)
    horizon_row: Optional[int] = None
    dtype: str = "f32"

    @classmethod
    def from_json(cls, d: dict) -> "StudyConfig":
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError("unsupported study config version")
        cols = tuple(d.get("columns", PRESETS))
        unknown = [c for c in cols if c not in PRESETS]
        if unknown:
            raise ValueError(f"unknown study columns {unknown}")
        return cls(model=M.ModelSpec.from_json(d.get("model", {})),
                   optimizer=OptimizerConfig(**d.get("optimizer", {})),
                   train_data=d["train_data"], eval_data=d["eval_data"],
                   seeds=tuple(int(s) for s in d.get("seeds", (0, 1, 2))), columns=cols,
                   det=DetConfig(**d.get("det", {})), horizon_row=d.get("horizon_row"),
                   dtype=d.get("dtype", "f32"))

    def to_json(self) -> dict:
        return {"version": CONFIG_VERSION, "model": self.model.to_json(), "optimizer": asdict(self.optimizer),
                "train_data": self.train_data, "eval_data": self.eval_data, "seeds": list(self.seeds),
                "columns": list(self.columns), "det": asdict(self.det), "horizon_row": self.horizon_row,
                "dtype": self.dtype}

    def experiment(self, column: str, seed: int) -> ExperimentConfig:
        oc = OptimizerConfig(**{**asdict(self.optimizer), "seed": seed})
        return ExperimentConfig.preset(column, self.model, optimizer=oc, det=self.det,
                                       horizon_row=self.horizon_row, dtype=self.dtype)


def _median(vals: list) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return float(statistics.median(vals)) if vals else None


def run_study(cfg: StudyConfig, out_dir=None, train_set: Optional[Dataset] = None,
              eval_set: Optional[Dataset] = None, progress: bool = False) -> dict:
    """Train every column for every seed, then report per-cell medians."""
    train_set = train_set or resolve_dataset(cfg.train_data)
    eval_set = eval_set or resolve_dataset(cfg.eval_data)
    out = Path(out_dir) if out_dir is not None else None
    runs, failures = [], []
    for col in cfg.columns:
        for seed in cfg.seeds:
            exp = cfg.experiment(col, seed)
            run_dir = out / "runs" / f"{col}_seed{seed}" if out is not None else None
            try:
                res = train(exp, run_dir, train_set, eval_set, progress)
            except Exception as e:  # one failed column must not sink the study
                log.error("run %s seed %d failed: %s", col, seed, e)
                failures.append({"column": col, "seed": seed, "error": repr(e)})
                continue
            seg_l = [r[1] for r in res.loss_log if r[1] is not None]
            det_l = [r[2] for r in res.loss_log if r[2] is not None]
            ratio = (float(np.mean(seg_l)) / float(np.mean(det_l))) if seg_l and det_l and np.mean(det_l) > 0 else None
            runs.append({"column": col, "seed": seed, **(res.final_eval or {}),
                         "mean_L_seg": float(np.mean(seg_l)) if seg_l else None,
                         "mean_L_det": float(np.mean(det_l)) if det_l else None,
                         "seg_det_loss_ratio": ratio})
            if progress:
                log.info("run %s seed %d done in %.0fs: miou=%s map=%s", col, seed, res.seconds,
                         runs[-1].get("miou"), runs[-1].get("map"))

    seg_classes, det_classes = cfg.model.seg_classes, cfg.model.det_classes
    results, summary = {}, {}
    for col in cfg.columns:
        rs = [r for r in runs if r["column"] == col]
        label = COLUMN_LABELS[col]
        if not rs:
            summary[label] = {"runs": 0}
            continue
        cell: dict = {}
        heads = PRESETS[col][0]
        if "seg" in heads:
            cell["seg_iou"] = [_median([r["seg_iou"][c] for r in rs]) for c in range(len(seg_classes))]
        if "det" in heads:
            cell["det_ap"] = [_median([r["det_ap"][c] for r in rs]) for c in range(len(det_classes))]
        results[label] = cell
        summary[label] = {"runs": len(rs),
                          "median_miou": _median([r.get("miou") for r in rs]),
                          "median_map": _median([r.get("map") for r in rs]),
                          "median_seg_det_loss_ratio": _median([r.get("seg_det_loss_ratio") for r in rs])}
    table = Mx.report_table(results, seg_classes, det_classes)
    report = {"table": table, "summary": summary, "runs": runs, "failures": failures}
    if out is not None:
        Mx.write_report(table, out)
        (out / "study.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
