"""Optimisation loop: AdamW with decoupled decay, per-epoch cosine annealing."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .losses import LossWeights, total_loss
from .numerics.rng import make_rng

log = logging.getLogger(__name__)


class NonFiniteTrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # <= 0 disables clipping
    lr_min_ratio: float = 0.1
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    use_consistency: bool = True
    use_metric_reg: bool = True
    checkpoint_every: int = 0  # epochs; 0 = final only

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 < self.lr_min_ratio <= 1:
            raise ValueError("lr_min_ratio must be in (0, 1]")


def cosine_lr(epoch, epochs, lr0, min_ratio=0.1):
    """lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi t / T_max)), T_max = epochs - 1."""
    lr_min = min_ratio * lr0
    t_max = epochs - 1
    if t_max <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / t_max))


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if p.decay and self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def epoch_order(seed, epoch, n):
    return make_rng(seed, "shuffle", epoch).permutation(n)


def train(model, ds, cfg, log_path=None, checkpoint_fn=None):
    """Fit ``model`` on ``ds``; returns a list of per-epoch loss dicts.

    Only parameters with ``requires_grad`` are updated.  ``checkpoint_fn(epoch)``
    is called every ``cfg.checkpoint_every`` epochs when given.
    """
    if len(ds) == 0:
        raise ValueError("train: dataset is empty")
    params = model.trainable_parameters()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    y_all = ds.normalized_scores()
    n = len(ds)
    history = []
    writer = None
    fh = None
    if log_path:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "L_task", "L_con", "L_reg", "total"])
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.lr_min_ratio)
            order = epoch_order(cfg.seed, epoch, n)
            drop_rng = make_rng(cfg.seed, "dropout", epoch)
            sums = {"task": 0.0, "con": 0.0, "reg": 0.0, "total": 0.0}
            batches = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                out = model(ds, idx, train=True, rng=drop_rng)
                both = out["y_main"] is not None and out["y_aux"] is not None
                loss, comps = total_loss(
                    out["y_hat"],
                    out["y_main"],
                    out["y_aux"],
                    y_all[idx],
                    out["H_fusion"],
                    cfg.loss,
                    use_consistency=cfg.use_consistency and both,
                    use_metric_reg=cfg.use_metric_reg,
                )
                if not math.isfinite(comps["total"]):
                    raise NonFiniteTrainingError(f"non-finite loss at epoch {epoch} batch {b}: {comps}")
                for p in params:
                    p.grad = None
                loss.backward()
                clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr)
                for k in sums:
                    sums[k] += comps[k]
                batches += 1
            row = {k: v / batches for k, v in sums.items()}
            row.update(epoch=epoch, lr=lr)
            history.append(row)
            log.info("epoch %d lr %.3g task %.5f con %.5f reg %.5f total %.5f", epoch, lr,
                     row["task"], row["con"], row["reg"], row["total"])
            if writer:
                writer.writerow([epoch, repr(lr), repr(row["task"]), repr(row["con"]), repr(row["reg"]),
                                 repr(row["total"])])
                fh.flush()
            if checkpoint_fn and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint_fn(epoch)
    finally:
        if fh:
            fh.close()
    return history


def train_config_dict(cfg):
    return asdict(cfg)


def train_config_from_dict(d):
    d = dict(d)
    loss = d.pop("loss", {})
    return TrainConfig(loss=LossWeights(**loss), **d)


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------

# row -> (model overrides, train overrides)
SUITES = {
    "components": {
        "baseline": ({"use_backbone": False}, {"use_consistency": False, "use_metric_reg": False}),
        "plus_llm": ({"use_pcmi": False, "use_lmrf": False, "use_mda": False, "prompt_variant": "none"}, {}),
        "plus_pcmi": ({"use_lmrf": False, "use_mda": False}, {}),
        "plus_lmrf": ({"use_mda": False}, {}),
        "full": ({}, {}),
        "wo_lmrf": ({"use_lmrf": False}, {}),
        "wo_pcmi": ({"use_pcmi": False}, {}),
        "wo_con": ({}, {"use_consistency": False}),
        "wo_reg": ({}, {"use_metric_reg": False}),
    },
    "removals": {
        "full": ({}, {}),
        "wo_lmrf": ({"use_lmrf": False}, {}),
        "wo_pcmi": ({"use_pcmi": False}, {}),
        "wo_con": ({}, {"use_consistency": False}),
        "wo_reg": ({}, {"use_metric_reg": False}),
    },
    "mda": {
        "full": ({}, {}),
        "path1_only": ({"path1_only": True}, {}),
        "path2_only": ({"path2_only": True}, {}),
        "simple_average": ({"use_mda": False}, {}),
    },
    "prompt": {
        "no_condition": ({"prompt_variant": "no_condition"}, {}),
        "no_task": ({"prompt_variant": "no_task"}, {}),
        "no_fusion_guide": ({"prompt_variant": "no_fusion_guide"}, {}),
        "no_special_tokens": ({"special_tokens": False}, {}),
        "no_prompts": ({"prompt_variant": "none", "special_tokens": False, "use_pcmi": False}, {}),
        "full": ({}, {}),
    },
}


def suite_rows(suite, model_cfg, train_cfg):
    """[(row name, ModelConfig, TrainConfig)] for a named ablation suite."""
    if suite not in SUITES:
        raise KeyError(f"unknown ablation suite {suite!r}; expected one of {sorted(SUITES)}")
    return [(name, replace(model_cfg, **mo), replace(train_cfg, **to)) for name, (mo, to) in SUITES[suite].items()]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
