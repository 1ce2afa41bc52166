"""
Two-stage training for AHNET
Stage one fits the 2D MC-GCN on slice triples; stage two transfers its
encoder, locks it, fits the anisotropic decoder and optionally fine-tunes
everything jointly. Both switch from the base loss to its focal form once
the epoch loss plateaus.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from core import tensor as T
from core.graph import forward
from core.nets import build_ahnet, build_mcgcn, net_preset
from core.objectives import (AdamState, FocalSpec, ParamGroup, adam_step, cross_entropy, focal_ce,
                             focal_l2, l2_loss, zero_grads)
from core.sampling import PatchSampler, Prefetcher
from core.transfer import (build_transfer_map, describe_transfer, is_encoder_layer, load_rule_overrides,
                           transfer_encoder, validate_slice_equivalence)
from store import Checkpoint, checkpoint_from_model
from utils import TrainingDivergedError, TransferError, get_error_message, log_event

logger = logging.getLogger("ahnet.training")

LOSS_COLUMNS = ["stage", "epoch", "step", "loss_kind", "loss", "base_loss"]


def output_channels(task):
    return 1 if task == "detection" else 2


# ============================================================
# LOSS SCHEDULE
# ============================================================


@dataclass
class LossSchedule:
    """Base loss until the epoch mean stops improving by plateau_tolerance over the window."""
    task: str
    focal: FocalSpec
    gamma: float
    class_weights: tuple = ()
    window: int = 3
    tolerance: float = 0.01
    switched_at: int = None
    epoch_means: list = field(default_factory=list)

    @classmethod
    def from_config(cls, task, cfg):
        focal = FocalSpec(gamma=cfg.gamma, d_max=cfg.d_max, scale=cfg.focal_scale, mode=cfg.focal_mode)
        return cls(task, focal, cfg.gamma, tuple(cfg.class_weights), cfg.plateau_window, cfg.plateau_tolerance)

    @property
    def focal_active(self):
        return self.switched_at is not None

    @property
    def kind(self):
        base = "l2" if self.task == "detection" else "ce"
        return f"focal_{base}" if self.focal_active else base

    def base_loss(self, out, target):
        if self.task == "detection":
            return l2_loss(out, target)
        return cross_entropy(out, target, self.class_weights or None)

    def loss(self, out, target):
        if not self.focal_active:
            return self.base_loss(out, target)
        if self.task == "detection":
            return focal_l2(out, target, self.focal)
        return focal_ce(out, target, self.gamma, self.class_weights or None)

    def end_epoch(self, epoch, mean):
        """Record the epoch mean; returns True when this epoch triggers the switch."""
        self.epoch_means.append(mean)
        if self.focal_active or len(self.epoch_means) <= self.window:
            return False
        reference = self.epoch_means[-self.window - 1]
        best = min(self.epoch_means[-self.window:])
        improvement = (reference - best) / reference if reference > 0 else 0.0
        if improvement < self.tolerance:
            self.switched_at = epoch
            return True
        return False


# ============================================================
# TRAINING LOOP
# ============================================================


def _encoder_digest(model):
    h = hashlib.sha256()
    for name, value in model.state().items():
        if name.startswith(("stem.", "stage")):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def run_epochs(model, feed, groups, state, schedule, epochs, steps_per_epoch, stage,
               history, progress=True):
    """
    Adam over batches from feed (a Prefetcher); appends one row per step to
    history. Phases drawing from one sampler share one feed.
    """
    params = [p for g in groups for p in g.params]
    step = len([r for r in history if r["stage"] == stage])
    for epoch in range(epochs):
        epoch_index = len(schedule.epoch_means)
        losses = []
        bar = tqdm(range(steps_per_epoch), desc=f"{stage} epoch {epoch_index}", disable=not progress,
                   leave=False)
        for _ in bar:
            x, y = feed.next()
            zero_grads(params)
            with T.GradTape() as tape:
                out = forward(model, x, mode="train")
                loss = schedule.loss(out, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(get_error_message('diverged', epoch=epoch_index, step=step,
                                                              value=value))
            base = value if not schedule.focal_active else schedule.base_loss(out, y).item()
            tape.backward(loss)
            adam_step(groups, state)
            history.append({"stage": stage, "epoch": epoch_index, "step": step,
                            "loss_kind": schedule.kind, "loss": value, "base_loss": base})
            losses.append(value)
            step += 1
            bar.set_postfix(loss=f"{value:.4g}")
        mean = float(np.mean(losses))
        logger.info("%s epoch %d: %s %.5g", stage, epoch_index, schedule.kind, mean)
        if schedule.end_epoch(epoch_index, mean):
            logger.info("%s: loss plateaued at epoch %d, switching to %s", stage, epoch_index, schedule.kind)
            log_event("loss_switch", stage=stage, step=step,
                      details={"epoch": epoch_index, "to": schedule.kind, "epoch_means": schedule.epoch_means})
    return history


def history_frame(history):
    return pd.DataFrame(history, columns=LOSS_COLUMNS)


def write_history(history, path):
    history_frame(history).to_csv(path, index=False, float_format="%.8g", lineterminator="\n")


# ============================================================
# STAGES
# ============================================================


def train_stage1_mcgcn(volumes, settings, progress=True):
    """Fit the 2D MC-GCN on slice triples; returns (checkpoint, history)."""
    cfg = settings.train
    net = net_preset(settings.preset, output_channels(settings.task))
    model = build_mcgcn(net, seed=settings.seed)
    sampler = PatchSampler(volumes, cfg, settings.task, seed=settings.seed + 11, mode="2d")
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    groups = [ParamGroup("mcgcn", cfg.lr_stage1, model.parameters(trainable=True))]
    schedule = LossSchedule.from_config(settings.task, cfg)
    history = []
    log_event("train_start", stage="stage1", details={"preset": settings.preset, "task": settings.task,
                                                      "epochs": cfg.epochs_stage1})
    with Prefetcher(sampler.batch, cfg.prefetch) as feed:
        run_epochs(model, feed, groups, state, schedule, cfg.epochs_stage1, cfg.steps_per_epoch,
                   "stage1", history, progress)
    log_event("train_done", stage="stage1", details={"final_loss": history[-1]["loss"] if history else None})
    return checkpoint_from_model(model, preset=settings.preset), history


def transfer_from_stage1(ckpt2d, settings, validate=True, overrides=None):
    """
    2D checkpoint -> (transfer rules, transferred encoder checkpoint, report).
    With validate the lifted encoder is first checked slice by slice on a
    random patch and a failing check raises; otherwise report only
    describes the tensor shapes.
    """
    net = net_preset(settings.preset, output_channels(settings.task))
    model2d = build_mcgcn(net, seed=settings.seed)
    model2d.load_state(ckpt2d.tensors)
    rules = build_transfer_map(model2d.layers)
    if overrides:
        rules = load_rule_overrides(overrides, rules)
    target = build_ahnet(net, seed=settings.seed)
    encoder = transfer_encoder(ckpt2d, rules, target_names=[n for n, _ in target.parameters()])
    if validate:
        check = build_ahnet(net, encoder, seed=settings.seed)
        rng = np.random.default_rng(settings.seed + 7)
        patch = rng.standard_normal(tuple(settings.train.patch)).astype(T.get_dtype())
        report = validate_slice_equivalence(model2d, check, patch)
    else:
        report = describe_transfer(rules, ckpt2d, encoder)
    return rules, encoder, report


def train_stage2_ahnet(volumes, encoder, settings, progress=True):
    """
    Build AH-Net around a transferred encoder checkpoint, lock the encoder,
    fit the decoder, then optionally fine-tune jointly. Returns (checkpoint, history).
    """
    cfg = settings.train
    net = net_preset(settings.preset, output_channels(settings.task))
    model = build_ahnet(net, encoder, seed=settings.seed)
    log_event("train_start", stage="stage2", details={"transferred": len(encoder),
                                                      "random_init": len(model.notes.get("random_init", []))})

    locked = model.lock(is_encoder_layer, freeze_bn_stats=cfg.freeze_bn_stats)
    digest = _encoder_digest(model)
    sampler = PatchSampler(volumes, cfg, settings.task, seed=settings.seed + 13, mode="3d")
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    schedule = LossSchedule.from_config(settings.task, cfg)
    history = []
    decoder = [(n, p) for n, p in model.parameters() if p.requires_grad]
    with Prefetcher(sampler.batch, cfg.prefetch) as feed:
        run_epochs(model, feed, [ParamGroup("decoder", cfg.lr_decoder, decoder)], state, schedule,
                   cfg.epochs_stage2, cfg.steps_per_epoch, "stage2", history, progress)
        if _encoder_digest(model) != digest:
            raise TransferError("Encoder tensors changed while locked")
        log_event("locked_phase_done", stage="stage2", details={"locked": len(locked), "encoder_sha256": digest})

        if cfg.joint and cfg.epochs_joint > 0:
            model.unlock()
            encoder_params = [(n, p) for n, p in model.parameters() if n.startswith(("stem.", "stage"))]
            groups = [ParamGroup("encoder", cfg.lr_stage1, encoder_params),
                      ParamGroup("decoder", cfg.lr_joint, decoder)]
            run_epochs(model, feed, groups, state, schedule, cfg.epochs_joint, cfg.steps_per_epoch,
                       "joint", history, progress)
    log_event("train_done", stage="stage2", details={"final_loss": history[-1]["loss"] if history else None,
                                                     "joint": bool(cfg.joint and cfg.epochs_joint > 0)})
    return checkpoint_from_model(model, preset=settings.preset), history


def load_model(kind, ckpt, settings):
    """Rebuild a trained model from its checkpoint; kind is mcgcn or ahnet."""
    net = net_preset(settings.preset, output_channels(settings.task))
    model = build_mcgcn(net, seed=settings.seed) if kind == "mcgcn" else build_ahnet(net, seed=settings.seed)
    model.load_state(ckpt.tensors if isinstance(ckpt, Checkpoint) else ckpt)
    return model
