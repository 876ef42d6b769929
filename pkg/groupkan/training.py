"""Loss, optimizer, learning-rate schedule, augmentation and the training loop."""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .config import AugmentFlags, LossConfig, TrainPlan
from .data import Sample, split, stack_images, stack_masks
from .errors import ContractError, DataError, DimensionError
from .metrics import f1, iou
from .module import Module
from .tensor import Parameter, Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_iou", "val_f1")

# Evaluation batch size; independent of the training batch size.
EVAL_BATCH_SIZE = 8


def bce_dice_loss(logits: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """bce_weight * BCE(sigmoid(logits), target) + dice_weight * (1 - soft Dice).

    BCE is computed from logits as softplus(z) - z * y. Soft Dice is
    averaged over the batch, with `dice_smooth` added to numerator and
    denominator of every sample.
    """
    target = as_tensor(target)
    if logits.shape != target.shape:
        raise DimensionError(f"Logits {logits.shape} and target {target.shape} differ")

    loss = as_tensor(0.0)
    if cfg.bce_weight:
        bce = (F.softplus(logits) - logits * target).mean()
        loss = loss + bce * cfg.bce_weight
    if cfg.dice_weight:
        axes = tuple(range(1, logits.ndim))
        probs = F.sigmoid(logits)
        intersection = (probs * target).sum(axis=axes)
        denominator = probs.sum(axis=axes) + target.sum(axis=axes)
        dice = (intersection * 2.0 + cfg.dice_smooth) / (denominator + cfg.dice_smooth)
        loss = loss + (1.0 - dice.mean()) * cfg.dice_weight
    return loss


def cosine_lr(epoch: int, plan: TrainPlan) -> float:
    """Cosine annealing from lr_start at epoch 0 to lr_end at the final epoch."""
    if not 0 <= epoch < plan.epochs:
        raise ContractError(f"epoch {epoch} is outside [0, {plan.epochs})")
    if epoch == 0:
        return plan.lr_start
    progress = epoch / (plan.epochs - 1)
    return plan.lr_end + 0.5 * (plan.lr_start - plan.lr_end) * (1 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, applied to `params` in place."""
    if len(grads) != len(params):
        raise ContractError(f"Got {len(grads)} gradients for {len(params)} parameters")
    missing = [index for index, grad in enumerate(grads) if grad is None]
    if missing:
        raise ContractError(f"Parameters {missing} have no gradient; run backward() first")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(param.data) for param in params]
        state.second_moment = [np.zeros_like(param.data) for param in params]
    elif len(state.first_moment) != len(params):
        raise ContractError("AdamState was created for a different parameter list")

    state.step += 1
    correction1 = 1 - state.beta1 ** state.step
    correction2 = 1 - state.beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if grad.shape != param.shape:
            raise DimensionError(f"Gradient {grad.shape} does not match parameter {param.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def augment(sample: Sample, flags: AugmentFlags, rng: np.random.Generator) -> Sample:
    """Right-angle rotation and flips, applied identically to image and mask.

    Three draws are consumed regardless of the flags.
    """
    quarter_turns = int(rng.integers(4))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)

    image, mask = sample.image, sample.mask
    if flags.rotation and quarter_turns:
        image = np.rot90(image, quarter_turns, axes=(1, 2))
        mask = np.rot90(mask, quarter_turns, axes=(0, 1))
    if flags.hflip and hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if flags.vflip and vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    return Sample(
        image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask), id=sample.id
    )


def predict_logits(net: Module, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE):
    """Inference-mode logits for a B x C x H x W image array."""
    was_training = net.training
    net.eval()
    try:
        outputs = [
            net(Tensor(images[start : start + batch_size])).data
            for start in range(0, len(images), batch_size)
        ]
    finally:
        net.train(was_training)
    return np.concatenate(outputs)


def evaluate(net: Module, samples: Sequence[Sample]) -> Dict[str, float]:
    """Mean per-sample IoU and F1 of thresholded predictions."""
    logits = predict_logits(net, stack_images(samples))
    masks = stack_masks(samples)
    preds = logits[:, 0] > 0
    return {
        "iou": float(np.mean([iou(p, m[0]) for p, m in zip(preds, masks)])),
        "f1": float(np.mean([f1(p, m[0]) for p, m in zip(preds, masks)])),
    }


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_iou: float
    val_f1: float


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_epoch: int
    best_val_iou: float
    best_val_f1: float
    state: Dict[str, np.ndarray]


def write_train_log(path: str, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf8") as fp:
        writer = csv.writer(fp)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for record in history:
            writer.writerow(
                [
                    record.epoch,
                    repr(record.lr),
                    repr(record.train_loss),
                    repr(record.val_iou),
                    repr(record.val_f1),
                ]
            )


def train_epoch(
    net: Module,
    samples: Sequence[Sample],
    plan: TrainPlan,
    loss_cfg: LossConfig,
    state: AdamState,
    epoch: int,
) -> float:
    """One pass over `samples`; returns the mean batch loss."""
    lr = cosine_lr(epoch, plan)
    params = net.parameters()
    order = np.random.default_rng([plan.seed, epoch]).permutation(len(samples))
    losses = []
    for batch, start in enumerate(range(0, len(order), plan.batch_size)):
        rng = np.random.default_rng([plan.seed, epoch, batch])
        batch_samples = [
            augment(samples[i], plan.augment, rng) for i in order[start : start + plan.batch_size]
        ]
        net.zero_grad()
        with Tape():
            logits = net(Tensor(stack_images(batch_samples)))
            loss = bce_dice_loss(logits, stack_masks(batch_samples), loss_cfg)
        loss.backward()
        adam_step(params, [param.grad for param in params], state, lr)
        losses.append(loss.item())
    return float(np.mean(losses))


def train(
    net: Module,
    samples: Sequence[Sample],
    plan: TrainPlan,
    loss_cfg: LossConfig = LossConfig(),
    log_path: Optional[str] = None,
) -> TrainResult:
    """Train with Adam under cosine annealing, keeping the best-IoU weights.

    The net ends up holding the best weights seen on the validation split.
    """
    if not samples:
        raise DataError("Cannot train on an empty dataset")
    train_set, val_set = split(samples, plan.split_fraction, plan.seed)
    logger.info(
        "Training on %d samples, validating on %d, for %d epochs",
        len(train_set),
        len(val_set),
        plan.epochs,
    )

    state = AdamState()
    history: List[EpochRecord] = []
    best: Optional[EpochRecord] = None
    best_state: Dict[str, np.ndarray] = net.state_dict()
    net.train()
    for epoch in range(plan.epochs):
        train_loss = train_epoch(net, train_set, plan, loss_cfg, state, epoch)
        scores = evaluate(net, val_set)
        record = EpochRecord(epoch, cosine_lr(epoch, plan), train_loss, scores["iou"], scores["f1"])
        history.append(record)
        logger.info(
            "epoch %d lr %.3g loss %.4f val_iou %.4f val_f1 %.4f",
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_iou,
            record.val_f1,
        )
        if best is None or record.val_iou > best.val_iou:
            best = record
            best_state = net.state_dict()
            logger.info("New best val_iou %.4f at epoch %d", record.val_iou, epoch)

    net.load_state_dict(best_state)
    if log_path is not None:
        write_train_log(log_path, history)
    return TrainResult(history, best.epoch, best.val_iou, best.val_f1, best_state)
