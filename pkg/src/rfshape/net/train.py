"""Training loop for the completion network.

Loss per sample: auction-EMD between the coarse cloud and a seeded subsample
of the complete cloud, plus alpha * squared Chamfer between the fine cloud
and the complete cloud, plus beta * classification cross-entropy.  alpha
ramps from 0.01 to 1.0 so early training shapes the coarse skeleton before
the folding stage dominates.

Everything runs in float64 on a fixed seed order, so two runs with the same
configuration produce bit-identical loss histories and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..augment import (NORM_CENTROID, TrainingSample, apply_normalization,
                       normalization_params, resample_points)
from . import autodiff as ad
from .model import ModelConfig, forward, init_params, predicted_class


class NonFiniteLoss(RuntimeError):
    """Raised when the loss stops being finite; carries the last good state."""

    def __init__(self, step: int, params: dict):
        self.step = step
        self.params = params
        super().__init__(f"loss became non-finite at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"       # "adam" or "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha_warmup_steps: int = 100
    alpha_max: float = 1.0
    beta: float = 0.1
    cd_target_points: int = 4096  # cap on the Chamfer target subsample
    norm_mode: str = NORM_CENTROID
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def alpha(self, step: int) -> float:
        """Linear warm-up from 0.01 to alpha_max over alpha_warmup_steps."""
        if self.alpha_warmup_steps <= 0:
            return self.alpha_max
        frac = min(1.0, step / self.alpha_warmup_steps)
        return 0.01 + (self.alpha_max - 0.01) * frac


@dataclass
class StepRecord:
    step: int
    loss: float
    emd: float
    cd: float
    cls: float
    alpha: float


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    emd: float
    cd: float
    cls: float
    accuracy: float


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    norm_mode: str = NORM_CENTROID


def prepare_sample(sample: TrainingSample, cfg: ModelConfig,
                   train_cfg: TrainConfig, rng: np.random.Generator):
    """Normalize from the partial and build fixed-size train arrays.

    Returns (input pts, coarse target, cd target, label).  Targets use the
    normalization derived from the partial alone, so the same transform is
    available at inference time.
    """
    center, scale = normalization_params(sample.partial, train_cfg.norm_mode)
    partial = apply_normalization(sample.partial, center, scale)
    complete = apply_normalization(sample.complete, center, scale)
    inp = resample_points(partial, cfg.n_input, rng)
    coarse_t = resample_points(complete, cfg.n_coarse, rng)
    if len(complete) > train_cfg.cd_target_points:
        cd_t = resample_points(complete, train_cfg.cd_target_points, rng)
    else:
        cd_t = complete
    return inp, coarse_t, cd_t, sample.class_id


def sample_loss(params: dict, cfg: ModelConfig, inp, coarse_t, cd_t,
                label: int, alpha: float, beta: float):
    """Forward one sample; returns (total loss tensor, parts, result)."""
    result = forward(params, cfg, inp)
    l_emd = ad.emd_loss(result.coarse, coarse_t)
    l_cd = ad.chamfer_loss(result.fine, cd_t)
    l_cls = ad.softmax_cross_entropy(result.logits, label)
    total = ad.add(ad.add(l_emd, ad.scale(l_cd, alpha)), ad.scale(l_cls, beta))
    parts = (float(l_emd.value), float(l_cd.value), float(l_cls.value))
    return total, parts, result


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: dict):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, params: dict, grads: dict):
        c = self.cfg
        self.t += 1
        if c.optimizer == "sgd":
            for k, p in params.items():
                self.m[k] = c.momentum * self.m[k] + grads[k]
                p.value = p.value - c.learning_rate * self.m[k]
            return
        b1, b2 = c.adam_beta1, c.adam_beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            p.value = p.value - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def split_samples(samples, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic shuffled train/validation split."""
    idx = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val_idx = set(int(i) for i in idx[:n_val])
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def train(samples, cfg: ModelConfig, train_cfg: TrainConfig,
          params: Optional[dict] = None,
          on_step=None) -> TrainResult:
    """Minibatch training over TrainingSample records.

    Per-sample graphs are built independently and gradients averaged over the
    batch.  Raises NonFiniteLoss (with the last finite parameters attached)
    if the total loss leaves the reals.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    master = np.random.SeedSequence(train_cfg.seed)
    init_rng = np.random.default_rng(master.spawn(1)[0])
    if params is None:
        params = init_params(cfg, init_rng)
    data_rng = np.random.default_rng(master.spawn(1)[0])

    # fixed per-sample targets: resampling once keeps epochs comparable
    prepared = [prepare_sample(s, cfg, train_cfg, data_rng) for s in samples]

    opt = _Optimizer(train_cfg, params)
    result = TrainResult(params=params, model_config=cfg,
                         norm_mode=train_cfg.norm_mode)
    order = np.arange(len(prepared))
    steps_per_epoch = max(1, math.ceil(len(prepared) / train_cfg.batch_size))
    epoch_acc = []
    epoch_parts = []
    epoch_idx = 0
    last_good = {k: p.value.copy() for k, p in params.items()}

    for step in range(train_cfg.steps):
        pos_in_epoch = step % steps_per_epoch
        if pos_in_epoch == 0:
            order = data_rng.permutation(len(prepared))
            epoch_acc = []
            epoch_parts = []
        batch_idx = order[pos_in_epoch * train_cfg.batch_size:
                          (pos_in_epoch + 1) * train_cfg.batch_size]
        if len(batch_idx) == 0:
            batch_idx = order[:train_cfg.batch_size]
        alpha = train_cfg.alpha(step)

        grads = {k: np.zeros_like(p.value) for k, p in params.items()}
        tot = emd_v = cd_v = cls_v = 0.0
        # divergence shows up as a non-finite loss below; the overflow
        # warnings numpy would raise on the way there are just noise
        with np.errstate(over="ignore", invalid="ignore"):
            for i in batch_idx:
                inp, coarse_t, cd_t, label = prepared[i]
                for p in params.values():
                    p.zero_grad()
                total, (l_emd, l_cd, l_cls), res = sample_loss(
                    params, cfg, inp, coarse_t, cd_t, label, alpha,
                    train_cfg.beta)
                ad.backward(total)
                for k, p in params.items():
                    if p.grad is not None:
                        grads[k] += p.grad
                tot += float(total.value)
                emd_v += l_emd
                cd_v += l_cd
                cls_v += l_cls
                epoch_acc.append(1.0 if predicted_class(res) == label else 0.0)
        nb = len(batch_idx)
        tot /= nb
        emd_v /= nb
        cd_v /= nb
        cls_v /= nb
        if not math.isfinite(tot):
            raise NonFiniteLoss(step, {k: v for k, v in last_good.items()})
        for k in grads:
            grads[k] /= nb
        opt.step(params, grads)
        last_good = {k: p.value.copy() for k, p in params.items()}

        rec = StepRecord(step=step, loss=tot, emd=emd_v, cd=cd_v, cls=cls_v,
                         alpha=alpha)
        result.steps.append(rec)
        epoch_parts.append((tot, emd_v, cd_v, cls_v))
        if on_step is not None:
            on_step(rec)
        if pos_in_epoch == steps_per_epoch - 1 or step == train_cfg.steps - 1:
            arr = np.asarray(epoch_parts)
            result.epochs.append(EpochRecord(
                epoch=epoch_idx,
                loss=float(arr[:, 0].mean()),
                emd=float(arr[:, 1].mean()),
                cd=float(arr[:, 2].mean()),
                cls=float(arr[:, 3].mean()),
                accuracy=float(np.mean(epoch_acc)) if epoch_acc else 0.0,
            ))
            epoch_idx += 1
    return result


def infer_clouds(params: dict, cfg: ModelConfig, points: np.ndarray,
                 norm_mode: str, rng: np.random.Generator):
    """Inference on a bare partial cloud; returns (coarse, fine, class id)
    at the input's true scale."""
    from ..augment import undo_normalization

    center, scale = normalization_params(points, norm_mode)
    partial = apply_normalization(points, center, scale)
    inp = resample_points(partial, cfg.n_input, rng)
    res = forward(params, cfg, inp)
    coarse = undo_normalization(res.coarse.value, center, scale)
    fine = undo_normalization(res.fine.value, center, scale)
    return coarse, fine, predicted_class(res)


def evaluate_sample(params: dict, cfg: ModelConfig, sample: TrainingSample,
                    norm_mode: str, rng: np.random.Generator):
    """Inference on one sample; returns (coarse, fine, class id) at true scale."""
    return infer_clouds(params, cfg, sample.partial, norm_mode, rng)
