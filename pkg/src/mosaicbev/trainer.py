"""Deterministic training loop, checkpoint/resume, and learning-rate grid search.

Batch schedule: sample index i = step * batch_size + j is drawn from the
permutation of epoch i // n_frames at position i % n_frames, each epoch
permutation seeded by (seed, 2, epoch). The schedule is a pure function of
(config, dataset), so a resumed run reproduces the unbroken run exactly.

In deterministic mode the run log's millis field is written as 0 so the log
is bitwise reproducible; with deterministic=false it records wall time.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataset import Dataset, gt_raster, image_to_input, load_dataset
from .errors import ConfigError, NumericAbortError
from .loss import LossConfig, total_loss
from .model import (BackboneConfig, HeadConfig, Model, DEFAULT_CANONICAL_SIZE,
                    load_checkpoint, save_checkpoint)
from .optim import Adam

RUNLOG_NAME = "runlog.jsonl"
CHECKPOINT_NAME = "checkpoint.ybev"
STAGES = ("overfit", "full")


@dataclass(frozen=True)
class TrainConfig:
    dataset_dir: str
    out_dir: str
    steps: int
    seed: int = 0
    lr: float = 0.001
    batch_size: int = 4
    stage: str = "overfit"
    checkpoint_every: int = 0  # 0 = checkpoint only at the end
    deterministic: bool = True
    resume: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    canonical_size: tuple[float, float] = DEFAULT_CANONICAL_SIZE

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be > 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return {
            "dataset_dir": self.dataset_dir, "out_dir": self.out_dir,
            "steps": self.steps, "seed": self.seed, "lr": self.lr,
            "batch_size": self.batch_size, "stage": self.stage,
            "checkpoint_every": self.checkpoint_every,
            "deterministic": self.deterministic, "resume": self.resume,
            "loss": {"alpha": self.loss.alpha, "beta": self.loss.beta,
                     "iou_pos_threshold": self.loss.iou_pos_threshold,
                     "bce_epsilon": self.loss.bce_epsilon},
            "head": self.head.to_dict(),
            "backbone": self.backbone.to_dict(),
            "canonical_size": list(self.canonical_size),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {"dataset_dir", "out_dir", "steps", "seed", "lr", "batch_size",
                 "stage", "checkpoint_every", "deterministic", "resume", "loss",
                 "head", "backbone", "canonical_size"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for req in ("dataset_dir", "out_dir", "steps"):
            if req not in d:
                raise ConfigError(f"config is missing required field {req!r}")
        kwargs = dict(d)
        if "loss" in d:
            try:
                kwargs["loss"] = LossConfig(**d["loss"])
            except TypeError as e:
                raise ConfigError(f"bad loss config: {e}") from e
        if "head" in d:
            kwargs["head"] = HeadConfig.from_dict(d["head"])
        if "backbone" in d:
            kwargs["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if "canonical_size" in d:
            try:
                kwargs["canonical_size"] = tuple(float(v) for v in d["canonical_size"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad canonical_size: {e}") from e
        try:
            return TrainConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    @staticmethod
    def from_json(path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return TrainConfig.from_dict(d)


@dataclass
class TrainResult:
    checkpoint_path: str
    runlog: list[dict]
    model: Model


def _runlog_line(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": ")) + "\n"


class _BatchSchedule:
    """Deterministic frame indices for any global sample position."""

    def __init__(self, seed: int, n_frames: int):
        self.seed = seed
        self.n = n_frames
        self._perms: dict[int, np.ndarray] = {}

    def frame_index(self, sample_pos: int) -> int:
        epoch, pos = divmod(sample_pos, self.n)
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, 2, epoch]).permutation(self.n)
            self._perms[epoch] = perm
        return int(perm[pos])


def train(cfg: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Run one training stage; writes runlog.jsonl, checkpoints, and a loss figure."""
    ds = dataset if dataset is not None else load_dataset(cfg.dataset_dir)
    if len(ds) == 0:
        raise ConfigError(f"dataset {cfg.dataset_dir} has no frames")
    inputs = [image_to_input(img) for _, img, _ in ds.frames]
    gts = [gt_raster(gt) for _, _, gt in ds.frames]

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.resume:
        model, opt_state, extra = load_checkpoint(cfg.resume)
        if opt_state is None:
            raise ConfigError(f"{cfg.resume}: checkpoint has no optimizer state")
        if opt_state["lr"] != cfg.lr:
            raise ConfigError(
                f"resume lr {opt_state['lr']} != config lr {cfg.lr}"
            )
        optimizer = Adam.from_state(model.params, opt_state)
        start_step = int(extra.get("step", 0))
        if start_step >= cfg.steps:
            raise ConfigError(
                f"checkpoint already at step {start_step} >= steps {cfg.steps}"
            )
        log_mode = "a"
    else:
        model = Model(backbone=cfg.backbone, head=cfg.head,
                      canonical_size=cfg.canonical_size, seed=cfg.seed)
        optimizer = Adam(model.params, lr=cfg.lr)
        start_step = 0
        log_mode = "w"

    schedule = _BatchSchedule(cfg.seed, len(ds))
    runlog: list[dict] = []
    ckpt_path = out / CHECKPOINT_NAME

    def _save(step: int, path) -> None:
        save_checkpoint(path, model, optimizer.state_dict(),
                        extra={"step": step, "stage": cfg.stage, "seed": cfg.seed})

    with open(out / RUNLOG_NAME, log_mode) as log:
        for step in range(start_step, cfg.steps):
            t0 = time.monotonic()
            idxs = [schedule.frame_index(step * cfg.batch_size + j)
                    for j in range(cfg.batch_size)]
            x = nc.Tensor(np.stack([inputs[i] for i in idxs]))
            scales = model.forward_decode(x)
            total, bd = total_loss(scales, [gts[i] for i in idxs], cfg.loss)
            if not math.isfinite(bd.total):
                log.write(_runlog_line({"step": step + 1, "error": "non-finite loss"}))
                log.flush()
                raise NumericAbortError(
                    f"non-finite loss at step {step + 1}", step=step + 1)
            model.zero_grad()
            total.backward()
            optimizer.step()
            millis = 0 if cfg.deterministic else int((time.monotonic() - t0) * 1000)
            record = {"step": step + 1, "l_bbox": bd.l_bbox,
                      "l_pos_conf": bd.l_pos_conf, "l_neg_conf": bd.l_neg_conf,
                      "total": bd.total, "n_pos": bd.n_pos, "n_neg": bd.n_neg,
                      "millis": millis}
            runlog.append(record)
            log.write(_runlog_line(record))
            log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save(step + 1, out / f"checkpoint_{step + 1:06d}.ybev")

    _save(cfg.steps, ckpt_path)
    try:
        from .plots import loss_curve_figure
        loss_curve_figure(runlog, out / "loss_curve.png")
    except Exception:
        pass  # figures are best-effort reporting, never fail the run
    return TrainResult(checkpoint_path=str(ckpt_path), runlog=runlog, model=model)


@dataclass
class GridRow:
    lr: float
    final_loss: float
    final_mean_iou: float
    status: str  # "ok" or "failed"


@dataclass
class GridSearchResult:
    rows: list[GridRow]
    best_lr: float | None


def grid_search(cfg: TrainConfig, lrs: list[float]) -> GridSearchResult:
    """Train once per learning rate (shared seed); emits a sorted results table.

    Writes gridsearch.csv and gridsearch.png under cfg.out_dir. A run that
    aborts numerically is marked failed without stopping the sweep. Best row
    is the smallest final loss, ties going to the smaller lr.
    """
    if not lrs:
        raise ConfigError("grid search needs at least one learning rate")
    ds = load_dataset(cfg.dataset_dir)
    rows: list[GridRow] = []
    for lr in sorted(set(lrs), reverse=True):
        sub = replace(cfg, lr=lr, out_dir=str(Path(cfg.out_dir) / f"lr_{lr:g}"),
                      resume=None)
        try:
            res = train(sub, dataset=ds)
            from .infer import evaluate_model
            report = evaluate_model(res.model, ds)
            rows.append(GridRow(lr=lr, final_loss=res.runlog[-1]["total"],
                                final_mean_iou=report.mean_iou, status="ok"))
        except NumericAbortError:
            rows.append(GridRow(lr=lr, final_loss=float("nan"),
                                final_mean_iou=float("nan"), status="failed"))
    ok = [r for r in rows if r.status == "ok"]
    best = min(ok, key=lambda r: (r.final_loss, r.lr)).lr if ok else None

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gridsearch.csv", "w") as fh:
        fh.write("lr,final_loss,final_mean_iou,status\n")
        for r in rows:
            fh.write(f"{r.lr:g},{r.final_loss:.9g},{r.final_mean_iou:.9g},{r.status}\n")
    try:
        from .plots import gridsearch_figure
        gridsearch_figure(rows, out / "gridsearch.png")
    except Exception:
        pass
    return GridSearchResult(rows=rows, best_lr=best)
