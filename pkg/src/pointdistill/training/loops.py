"""Pre-training, fine-tuning, evaluation and the reconstruction probe."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import numerics as nx
from ..errors import IncompatibleError, PairingError, TrainingAborted
from ..geometry import group_cloud
from ..model import Backbone, Classifier, ModelConfig, PretrainModel, ReconHead, random_mask
from ..model.layers import initialize
from ..model.network import mask_and_reconstruct
from ..numerics import NonFiniteError, Tape
from ..persistence import (Checkpoint, Dataset, OptimizerSnapshot, load_encoder, load_state,
                           save_checkpoint, state_dict)
from ..teacher import PrefixEmbedding, TeacherFixtureSet
from .augment import AugmentConfig, augment, counter_rng
from .optim import AdamWState, NonFiniteGradientError, ScheduleConfig, adamw_step, lr_at

LOSS_MODES = ("distill", "recon", "both", "none")


@dataclass(frozen=True)
class TrainConfig:
    """Pre-training loop settings; defaults follow the full-scale recipe."""

    loss: str = "distill"
    no_concept: bool = False
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 250
    warmup_epochs: int = 10
    min_lr: float = 1e-6
    max_steps: int | None = None
    decoder_seed: int | None = None
    freeze_decoder: bool = False
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr, self.warmup_epochs, self.epochs, self.min_lr)

    @property
    def uses_distill(self) -> bool:
        return self.loss in ("distill", "both")

    @property
    def uses_recon(self) -> bool:
        return self.loss in ("recon", "both")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 32
    seed: int = 0
    lr: float = 5e-4
    weight_decay: float = 0.05
    epochs: int = 300
    warmup_epochs: int = 10
    min_lr: float = 1e-6
    max_steps: int | None = None
    augment: AugmentConfig = AugmentConfig()

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr, self.warmup_epochs, self.epochs, self.min_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d


# --- batching -----------------------------------------------------------------

def _subsample(cloud: np.ndarray, n: int, seed: int, index: int) -> np.ndarray:
    if cloud.shape[0] == n:
        return cloud
    if cloud.shape[0] < n:
        raise IncompatibleError(f"sample has {cloud.shape[0]} points, model expects {n}")
    keep = np.sort(counter_rng(seed, "subsample", index).choice(cloud.shape[0], n, replace=False))
    return cloud[keep]


def prepare_batch(ds: Dataset, indices, cfg: ModelConfig, seed: int, aug: AugmentConfig | None,
                  *stream) -> tuple[np.ndarray, np.ndarray]:
    """Augment, subsample and group samples into (B, g, k, 3) patches and (B, g, 3) centers.

    Augmentation draws come from ``counter_rng(seed, "augment", index, *stream)``.
    """
    patches, centers = [], []
    for i in indices:
        i = int(i)
        cloud = _subsample(ds.clouds[i], cfg.num_points, seed, i)
        if aug is not None and aug.enabled:
            cloud = augment(cloud, aug, counter_rng(seed, "augment", i, *stream))
        ps = group_cloud(cloud, cfg.num_patches, cfg.patch_size)
        patches.append(ps.patches)
        centers.append(ps.centers)
    return np.stack(patches).astype(np.float32), np.stack(centers).astype(np.float32)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return counter_rng(seed, "order", epoch).permutation(n)


def format_record(rec: dict, wall: bool = False) -> str:
    """One JSON line with fixed field order: epoch, mode, loss, lr[, wall]."""
    keys = ["epoch", "mode", "loss", "lr"] + (["wall"] if wall else [])
    keys += [k for k in rec if k not in keys and k != "wall"]
    return json.dumps({k: rec[k] for k in keys if k in rec})


class _EpochMeter:
    """Float64 running sums of per-step losses; serialisable for mid-epoch resume."""

    def __init__(self, state: dict | None = None):
        state = state or {}
        self.sums = dict(state.get("sums", {}))
        self.count = int(state.get("count", 0))
        self.extra = dict(state.get("extra", {}))

    def add(self, values: dict) -> None:
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.count += 1

    def means(self) -> dict:
        return {k: v / self.count for k, v in self.sums.items()} if self.count else {}

    def state(self) -> dict:
        return {"sums": self.sums, "count": self.count, "extra": self.extra}


@dataclass
class TrainResult:
    model: object
    optimizer: AdamWState
    step: int
    records: list[dict] = field(default_factory=list)
    step_losses: list[dict] = field(default_factory=list)
    teacher_grad_norms: list[float] = field(default_factory=list)
    order_hash: str = ""
    meter_state: dict = field(default_factory=dict)
    checkpoint: Checkpoint | None = None


def _trainable(model, freeze_prefix: str | None = None) -> dict:
    return {n: p for n, p in model.named_parameters()
            if freeze_prefix is None or not n.startswith(freeze_prefix)}


def _optimizer_from(snapshot: OptimizerSnapshot | None, weight_decay: float) -> AdamWState:
    st = AdamWState(weight_decay=weight_decay)
    if snapshot is not None:
        st.step = snapshot.step
        st.m = {k: v.copy() for k, v in snapshot.m.items()}
        st.v = {k: v.copy() for k, v in snapshot.v.items()}
    return st


def make_checkpoint(model, opt: AdamWState | None, cfg: ModelConfig, seed: int, step: int,
                    meta: dict) -> Checkpoint:
    snap = None if opt is None else OptimizerSnapshot(opt.step, dict(opt.m), dict(opt.v))
    return Checkpoint(cfg, {k: v.copy() for k, v in state_dict(model).items()}, seed, step, meta, snap)


def build_pretrain_model(cfg: ModelConfig, tc: TrainConfig) -> PretrainModel:
    return PretrainModel(cfg, distill=tc.uses_distill, recon=tc.uses_recon, no_concept=tc.no_concept,
                         seed=tc.seed, recon_seed=tc.decoder_seed)


def _check_pairing(ds: Dataset, teacher: TeacherFixtureSet | None, cfg: ModelConfig) -> None:
    if teacher is None:
        raise PairingError("distillation needs teacher fixtures")
    if (teacher.l, teacher.d_cap) != (cfg.prefix_len, cfg.teacher_dim):
        raise IncompatibleError(f"teacher embeddings are ({teacher.l}, {teacher.d_cap}), "
                                f"model projects to ({cfg.prefix_len}, {cfg.teacher_dim})")
    missing = [sid for sid in ds.ids if sid not in teacher]
    if missing:
        raise PairingError(f"{len(missing)} samples have no teacher embedding, e.g. {missing[0]!r}")


def pretrain(ds: Dataset, cfg: ModelConfig, tc: TrainConfig, teacher: TeacherFixtureSet | None = None,
             resume: Checkpoint | None = None, on_record: Callable[[dict], None] | None = None,
             abort_path=None) -> TrainResult:
    """Run the pre-training loop for ``tc.loss`` and return the trained model.

    Every random draw is keyed by (seed, step or epoch, sample index), so a run
    resumed from a checkpoint replays exactly the steps a straight run would
    have taken. ``on_record`` receives each per-epoch record as it completes.
    On a non-finite loss or gradient the current (still finite) state is saved
    to ``abort_path`` and ``TrainingAborted`` is raised.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if tc.uses_distill:
        _check_pairing(ds, teacher, cfg)
    model = build_pretrain_model(cfg, tc)
    opt = _optimizer_from(None, tc.weight_decay)
    step = 0
    meter = _EpochMeter()
    if resume is not None:
        load_state(model, resume.tensors)
        opt = _optimizer_from(resume.optimizer, tc.weight_decay)
        step = resume.step
        meter = _EpochMeter(resume.meta.get("epoch_meter"))
    model.train()
    params = _trainable(model, "recon." if tc.freeze_decoder else None)
    spe = math.ceil(len(ds) / tc.batch_size)
    stop = tc.epochs * spe if tc.max_steps is None else min(tc.max_steps, tc.epochs * spe)
    result = TrainResult(model, opt, step)
    order, order_epoch = None, -1
    t0 = time.perf_counter()

    def snapshot(at: int) -> Checkpoint:
        meta = {"kind": "pretrain", "train": tc.to_dict(), "epoch_meter": meter.state()}
        return make_checkpoint(model, opt, cfg, tc.seed, at, meta)

    while step < stop:
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(len(ds), tc.seed, epoch), epoch
        idx = order[pos * tc.batch_size:(pos + 1) * tc.batch_size]
        lr = lr_at(step, spe, tc.schedule)
        values = {}
        if tc.loss != "none":
            patches, centers = prepare_batch(ds, idx, cfg, tc.seed, tc.augment, epoch)
            target = None
            try:
                model.zero_grad()
                with Tape() as tape:
                    losses = {}
                    if tc.uses_distill:
                        target = PrefixEmbedding(teacher.stack([ds.ids[i] for i in idx]))
                        losses["distill"] = model.distill_loss(patches, centers, target)
                    if tc.uses_recon:
                        mask = random_mask(len(idx), cfg.num_patches, cfg.mask_ratio,
                                           counter_rng(tc.seed, "mask", step))
                        losses["recon"] = model.recon_loss(patches, centers, mask)
                    total = None
                    for v in losses.values():  # unit weights
                        total = v if total is None else nx.add(total, v)
                tape.backward(total)
                adamw_step(params, {n: p.grad for n, p in params.items()}, opt, lr)
            except (NonFiniteError, NonFiniteGradientError) as exc:
                ck = snapshot(step)
                if abort_path is not None:
                    save_checkpoint(abort_path, ck)
                raise TrainingAborted(f"step {step}: {exc}", step, abort_path) from exc
            values = {k: float(v.item()) for k, v in losses.items()}
            values["total"] = sum(values.values())
            result.teacher_grad_norms.append(
                0.0 if target is None or target.grad is None else float(np.linalg.norm(target.grad)))
        step += 1
        result.step_losses.append(values)
        meter.add(values)
        meter.extra["lr"] = lr
        if pos == spe - 1:
            rec = {"epoch": epoch, "mode": tc.loss, "loss": meter.means(), "lr": lr,
                   "wall": round(time.perf_counter() - t0, 3)}
            result.records.append(rec)
            if on_record is not None:
                on_record(rec)
            meter = _EpochMeter()
    result.step = step
    result.meter_state = meter.state()
    result.checkpoint = snapshot(step)
    return result


# --- fine-tuning and evaluation --------------------------------------------

def finetune_classify(ds: Dataset, cfg: ModelConfig, fc: FinetuneConfig, init: Checkpoint | None = None,
                      num_classes: int | None = None,
                      on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Cross-entropy fine-tuning of encoder + classification head.

    With ``init`` the encoder is copied from the checkpoint (heads stay at
    their seeded initialisation); otherwise training starts from scratch.
    Two runs with the same config see the same batches in the same order
    regardless of initialisation; ``order_hash`` records that sequence.
    """
    if ds.labels is None:
        raise ValueError("fine-tuning needs a labelled dataset")
    k = num_classes or int(ds.labels.max()) + 1
    model = Classifier(cfg, k, seed=fc.seed)
    if init is not None:
        load_encoder(model, init)
    model.train()
    params = _trainable(model)
    opt = AdamWState(weight_decay=fc.weight_decay)
    spe = math.ceil(len(ds) / fc.batch_size)
    stop = fc.epochs * spe if fc.max_steps is None else min(fc.max_steps, fc.epochs * spe)
    result = TrainResult(model, opt, 0)
    digest = hashlib.sha256()
    t0 = time.perf_counter()
    step = 0
    while step < stop:
        epoch = step // spe
        order = epoch_order(len(ds), fc.seed, epoch)
        meter = _EpochMeter()
        correct = 0
        seen = 0
        for pos in range(spe):
            if step >= stop:
                break
            idx = order[pos * fc.batch_size:(pos + 1) * fc.batch_size]
            digest.update(idx.astype("<i8").tobytes())
            lr = lr_at(step, spe, fc.schedule)
            patches, centers = prepare_batch(ds, idx, cfg, fc.seed, fc.augment, epoch)
            labels = ds.labels[idx]
            model.zero_grad()
            with Tape() as tape:
                logits = model(patches, centers)
                loss = nx.cross_entropy(logits, labels)
            tape.backward(loss)
            adamw_step(params, {n: p.grad for n, p in params.items()}, opt, lr)
            correct += int((logits.data.argmax(-1) == labels).sum())
            seen += len(idx)
            meter.add({"ce": loss.item()})
            result.step_losses.append({"ce": loss.item()})
            step += 1
        rec = {"epoch": epoch, "mode": "finetune", "loss": meter.means(), "lr": lr,
               "train_acc": correct / seen, "wall": round(time.perf_counter() - t0, 3)}
        result.records.append(rec)
        if on_record is not None:
            on_record(rec)
    result.step = step
    result.order_hash = digest.hexdigest()
    return result


def predict_logits(model, ds: Dataset, votes: int = 1, seed: int = 0, aug: AugmentConfig = AugmentConfig(),
                   batch_size: int = 64) -> np.ndarray:
    """Float64 logits averaged over ``votes`` augmented copies (a single plain pass when votes=1)."""
    if votes < 1:
        raise ValueError("votes must be >= 1")
    was_training = model.training
    model.eval()
    cfg = model.cfg
    total = None
    try:
        for r in range(votes):
            use = aug if votes > 1 else None
            chunks = []
            for start in range(0, len(ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(ds)))
                patches, centers = prepare_batch(ds, idx, cfg, seed, use, "vote", r)
                chunks.append(model(patches, centers).data.astype(np.float64))
            logits = np.concatenate(chunks)
            total = logits if total is None else total + logits
    finally:
        model.train(was_training)
    return total / votes


def evaluate(model, ds: Dataset, votes: int = 1, seed: int = 0, aug: AugmentConfig = AugmentConfig(),
             batch_size: int = 64) -> dict:
    logits = predict_logits(model, ds, votes, seed, aug, batch_size)
    pred = logits.argmax(-1)
    acc = float((pred == ds.labels).mean()) if len(ds) else 0.0
    return {"accuracy": acc, "votes": votes, "samples": len(ds)}


def mean_iou(pred, target, num_classes: int) -> tuple[float, np.ndarray]:
    """Mean intersection-over-union across classes present in prediction or target."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    ious = np.full(num_classes, np.nan)
    for c in range(num_classes):
        union = np.sum((pred == c) | (target == c))
        if union:
            ious[c] = np.sum((pred == c) & (target == c)) / union
    present = ious[~np.isnan(ious)]
    return (float(present.mean()) if present.size else 1.0), ious


def probe_decoder(cfg: ModelConfig, decoder_seed: int) -> ReconHead:
    """The frozen reconstruction decoder the probe uses, identical to PretrainModel's with recon_seed."""
    head = ReconHead(cfg)
    initialize(head, decoder_seed, "recon.", cfg.init_std)
    return head


def recon_probe(encoder: Backbone, cfg: ModelConfig, ds: Dataset, decoder_seed: int,
                mask_seed: int = 0, batch_size: int = 32) -> float:
    """Mean masked-reconstruction Chamfer loss of ``encoder`` under a never-trained decoder."""
    decoder = probe_decoder(cfg, decoder_seed)
    was_training = encoder.training
    encoder.eval()
    total = 0.0
    try:
        for b, start in enumerate(range(0, len(ds), batch_size)):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            patches, centers = prepare_batch(ds, idx, cfg, mask_seed, None)
            mask = random_mask(len(idx), cfg.num_patches, cfg.mask_ratio, counter_rng(mask_seed, "probe", b))
            loss = mask_and_reconstruct(patches, centers, encoder, decoder, mask)
            total += float(loss.item()) * len(idx)
    finally:
        encoder.train(was_training)
    return total / len(ds)

