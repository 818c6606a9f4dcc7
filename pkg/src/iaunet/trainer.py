"""Training loop, RMSProp, checkpoint/resume and k-fold cross-validation.

Every random draw inside a step comes from a generator seeded by
``(seed, aug.seed, step)``, and the epoch order from ``(seed, epoch)``, so a
run restored from a checkpoint replays exactly what an uninterrupted run would.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data.augment import AugmentationConfig, augment
from .data.io import image_to_chw, read_image, read_mask
from .data.triplets import TripletSampler
from .errors import ConfigurationError, DataValidationError, IAUNetError, NumericError
from .losses import LossConfig, total_loss
from .model import IAUNet, ModelConfig
from .nn import functional as F
from .nn import kernels

OPT_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    rmsprop_alpha: float = 0.99
    rmsprop_momentum: float = 0.9
    weight_decay: float = 1e-8
    grad_clip_norm: float = 1.0
    hard_negative_prob: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    checkpoint_dir: str | None = None
    log_every: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigurationError("epochs, batch_size and log_every must be >= 1")
        if self.lr <= 0 or self.grad_clip_norm <= 0:
            raise ConfigurationError("lr and grad_clip_norm must be positive")
        if not 0 <= self.rmsprop_alpha < 1 or not 0 <= self.rmsprop_momentum < 1:
            raise ConfigurationError("rmsprop_alpha and rmsprop_momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["aug"] = AugmentationConfig(**d.get("aug", {}))
        return cls(**d)


# optimizer


def _finite(g):
    flat = g.ravel()
    return math.isfinite(float(np.dot(flat, flat))) or bool(np.isfinite(flat).all())


def rmsprop_step(params, state, cfg, check=True):
    """In-place RMSProp with heavy-ball momentum on ``params`` (using ``p.grad``).

    ``g <- g + wd*p; v <- a*v + (1-a)*g^2; m <- mu*m + g/sqrt(v + 1e-8); p <- p - lr*m``.
    ``state`` maps parameter name to ``(v, m)`` and is created lazily.
    ``check=False`` skips the per-parameter finiteness scan (the caller has
    already seen a finite global gradient norm).
    """
    for p in params:
        if p.grad is None:
            continue
        if check and not _finite(p.grad):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        if p.name not in state:
            state[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        v, m = state[p.name]
        if v.shape != p.data.shape:
            raise ConfigurationError(f"optimizer state for {p.name!r} has shape {v.shape}")
        kernels.rmsprop_update(p.data, p.grad, v, m, cfg.lr, cfg.rmsprop_alpha,
                               cfg.rmsprop_momentum, cfg.weight_decay, OPT_EPS)
    return state


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ConfigurationError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= g.dtype.type(scale)
    return total


# one step


@dataclass
class TripletBatch:
    anchors: np.ndarray    # [B,C,H,W]
    masks: np.ndarray      # [B,1,H,W] in {0,1}
    positives: np.ndarray  # [B,C,H,W]
    negatives: np.ndarray  # [B,C,H,W]


@dataclass
class StepMetrics:
    total: float
    seg: float
    tri: float
    grad_norm: float


def train_step(model, batch, cfg, state):
    """Forward anchors through both branches and references through the embedding
    branch only, then backprop ``seg + lam * tri``, clip and update."""
    model.train()
    model.zero_grad()
    b = batch.anchors.shape[0]
    logits, e_a = model.forward_anchor(batch.anchors, batch.masks)
    # positives and negatives share one reference pass
    e_ref = model.forward_embed_reference(np.concatenate([batch.positives, batch.negatives]))
    e_p, e_n = F.narrow(e_ref, 0, b), F.narrow(e_ref, b, 2 * b)
    total, seg, tri = total_loss(logits, batch.masks, e_a, e_p, e_n, cfg.loss)
    total.backward()
    params = model.parameters()
    norm = clip_grad_norm(params, cfg.grad_clip_norm)
    rmsprop_step(params, state, cfg, check=not math.isfinite(norm))
    return StepMetrics(total.item(), seg.item(), tri.item(), norm)


# loop


class Trainer:
    """Owns a model, its optimizer state and the deterministic batch schedule."""

    def __init__(self, records, pool, cfg, model=None, model_config=None, log_path=None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.model = model or IAUNet(model_config or ModelConfig(), seed=cfg.seed, dtype=self.dtype)
        self.anchors = sorted((r for r in records if r.mask_path is not None),
                              key=lambda r: r.record_id or str(r.image_path))
        if not self.anchors:
            raise DataValidationError("training needs at least one record with a mask")
        self.sampler = TripletSampler(records, pool, cfg.hard_negative_prob)
        self.state = {}
        self.step = 0
        self.history = []
        self.log_path = Path(log_path) if log_path else None
        self._images, self._masks = {}, {}

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.anchors) / self.cfg.batch_size)

    def _image(self, rec):
        key = str(rec.image_path)
        if key not in self._images:
            self._images[key] = image_to_chw(read_image(rec.image_path)).astype(self.dtype)
        return self._images[key]

    def _mask(self, rec):
        key = str(rec.mask_path)
        if key not in self._masks:
            self._masks[key] = read_mask(rec.mask_path)
        return self._masks[key]

    def batch_for_step(self, step):
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.anchors))
        bs = self.cfg.batch_size
        rng = np.random.default_rng([self.cfg.seed, self.cfg.aug.seed, step])
        a_imgs, masks, p_imgs, n_imgs = [], [], [], []
        for idx in order[pos * bs:(pos + 1) * bs]:
            t = self.sampler.sample(self.anchors[idx], rng)
            img, m = augment(self._image(t.anchor), self._mask(t.anchor), self.cfg.aug, rng)
            a_imgs.append(img)
            masks.append(m[None])
            p_imgs.append(augment(self._image(t.positive), None, self.cfg.aug, rng)[0])
            n_imgs.append(augment(self._image(t.negative), None, self.cfg.aug, rng)[0])
        return TripletBatch(np.stack(a_imgs), np.stack(masks).astype(self.dtype),
                            np.stack(p_imgs), np.stack(n_imgs))

    def train_step(self):
        batch = self.batch_for_step(self.step)
        try:
            metrics = train_step(self.model, batch, self.cfg, self.state)
        except NumericError as exc:
            raise NumericError(f"step {self.step}: {exc}") from exc
        self.step += 1
        if self.step % self.cfg.log_every == 0:
            self._log(metrics)
        return metrics

    def _log(self, metrics):
        rec = {"step": self.step, "total": metrics.total, "seg": metrics.seg,
               "tri": metrics.tri, "grad_norm": metrics.grad_norm, "lr": self.cfg.lr}
        self.history.append(rec)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def fit(self, steps=None, progress=None):
        """Train until ``steps`` total steps (default: ``epochs`` full epochs)."""
        target = self.cfg.epochs * self.steps_per_epoch if steps is None else steps
        while self.step < target:
            metrics = self.train_step()
            if progress is not None:
                progress(self.step, metrics)
            if self.cfg.checkpoint_dir and self.step % self.steps_per_epoch == 0:
                self.save(Path(self.cfg.checkpoint_dir) / "last.ckpt")
        if self.cfg.checkpoint_dir:
            self.save(Path(self.cfg.checkpoint_dir) / "last.ckpt")
        return self.history

    def save(self, path):
        extra = {}
        for name, (v, m) in self.state.items():
            extra[f"optim.v.{name}"] = v
            extra[f"optim.m.{name}"] = m
        ckpt.save_checkpoint(self.model, path, extra=extra,
                             meta={"step": self.step, "train_config": self.cfg.to_dict()})

    @classmethod
    def resume(cls, path, records, pool, cfg=None, log_path=None):
        model, header, arrays = ckpt.load_checkpoint(path)
        cfg = cfg or TrainConfig.from_dict(header["meta"]["train_config"])
        trainer = cls(records, pool, cfg, model=model, log_path=log_path)
        trainer.step = int(header["meta"]["step"])
        for name, _ in model.named_parameters():
            if f"optim.v.{name}" in arrays:
                trainer.state[name] = (arrays[f"optim.v.{name}"], arrays[f"optim.m.{name}"])
        return trainer


# cross-validation


@dataclass
class FoldPlan:
    folds: list  # list of lists of record indices
    seed: int

    @property
    def k(self):
        return len(self.folds)


def make_folds(records, k=10, seed=0):
    """Seeded shuffle of the id-sorted records, then a contiguous split.

    Sorting by id first makes fold membership independent of input order; the
    first ``n % k`` folds get one extra record.
    """
    n = len(records)
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    if n < k:
        raise ConfigurationError(f"{n} records cannot fill {k} folds")
    keys = [r.record_id or str(r.image_path) for r in records]
    by_id = sorted(range(n), key=lambda i: keys[i])
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [by_id[j] for j in perm]
    base, extra = divmod(n, k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append(sorted(shuffled[start:start + size]))
        start += size
    return FoldPlan(folds, seed)


@dataclass
class CVResult:
    reports: list    # MetricReport per fold
    aggregate: dict  # mean/std over fold means


def run_cross_validation(records, cfg, k=10, pool=None, model_config=None, threshold=0.5,
                         progress=None):
    from .evaluation import evaluate

    plan = make_folds(records, k, cfg.seed)
    reports = []
    for f, test_idx in enumerate(plan.folds):
        held = set(test_idx)
        train = [r for i, r in enumerate(records) if i not in held]
        test = [records[i] for i in test_idx]
        try:
            trainer = Trainer(train, pool, cfg, model_config=model_config)
            trainer.fit()
            report = evaluate(trainer.model, test, threshold=threshold)
        except IAUNetError as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        report.fold_id = f
        reports.append(report)
        if progress is not None:
            progress(f, report)
    dice = np.array([r.aggregate["dice_mean"] for r in reports])
    iou = np.array([r.aggregate["iou_mean"] for r in reports])
    aggregate = {"dice_mean": float(dice.mean()), "dice_std": float(dice.std()),
                 "iou_mean": float(iou.mean()), "iou_std": float(iou.std()), "k": k}
    return CVResult(reports, aggregate)
