"""Train-then-evaluate runs shared by the CLI, the ablation sweep and the acceptance tests."""

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import SyntheticConfig, generate, generate_split
from .evaluation import evaluate_conditions
from .losses import LossWeights, total_loss
from .model import LIMSSR, ModelConfig
from .numerics.gradcheck import NonFiniteLossError, relative_error
from .numerics.tensor import Tensor, no_grad
from .training import TrainConfig, suite_rows, train

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    model: LIMSSR
    history: list
    report: object
    seconds: float


def model_config_for(data_cfg, **overrides):
    """ModelConfig whose input widths and T match the synthetic data."""
    return ModelConfig(dims=dict(data_cfg.dims), T=data_cfg.T, **overrides)


def make_split(data_cfg, n_train=512, n_test=128):
    return generate_split(data_cfg, n_train, n_test)


def run(model_cfg, train_cfg, train_ds, test_ds, log_path=None):
    """Seed the model from the run seed, train, evaluate all conditions."""
    t0 = time.time()
    model = LIMSSR(replace(model_cfg, seed=train_cfg.seed))
    history = train(model, train_ds, train_cfg, log_path=log_path)
    report = evaluate_conditions(model, test_ds)
    return RunResult(model, history, report, time.time() - t0)


def run_suite(suite, model_cfg, train_cfg, train_ds, test_ds, seeds, rows=None):
    """{row: {seed: RunResult}} for an ablation suite over shared data."""
    out = {}
    for name, mc, tc in suite_rows(suite, model_cfg, train_cfg):
        if rows is not None and name not in rows:
            continue
        out[name] = {}
        for seed in seeds:
            res = run(mc, replace(tc, seed=seed), train_ds, test_ds)
            log.info("%s seed %d: avg rho %.4f full rho %.4f (%.0fs)", name, seed,
                     res.report.incomplete_average["rho"], res.report.full["rho"], res.seconds)
            out[name][seed] = res
    return out


# ---------------------------------------------------------------------------
# gradient check on a toy configuration
# ---------------------------------------------------------------------------

TOY_MASKS = ((1, 0, 1), (0, 1, 0))


def toy_setup(seed=1):
    """64-bit toy model (T=4, D=32, K=4, one layer, dropout off) and a 2-sample batch."""
    dims = {"v": 4, "f": 4, "a": 4}
    dc = SyntheticConfig(num_samples=2, T=4, latent_dim=4, dims=dims, seed=seed)
    ds = generate(dc)
    ds.masks[:] = TOY_MASKS
    mc = ModelConfig(
        dims=dims, T=4, K=4, num_layers=1, num_heads=4, model_dim=32, ffn_dim=64,
        lora_rank=4, lora_alpha=8.0, lora_dropout=0.0, dropout_rate=0.0, mda_hidden=8,
        dtype="float64", seed=seed,
    )
    model = LIMSSR(mc)
    # move the zero-initialised pieces off their special values so every
    # parameter gets a generic gradient
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters().items():
        if p.requires_grad:
            p.data += 0.05 * rng.normal(size=p.shape)
    return model, ds


def _batched_differences(flat, eps, chunk, snapshot, evaluate):
    """Central differences for every entry of ``flat``, ``chunk`` entries per evaluation.

    ``snapshot()`` captures the model input implied by the current (perturbed)
    parameter values; ``evaluate(snapshots)`` returns one loss per snapshot.
    """
    numeric = np.empty(flat.size)
    for start in range(0, flat.size, chunk):
        ids = range(start, min(start + chunk, flat.size))
        snaps = []
        for i in ids:
            orig = flat[i]
            flat[i] = orig + eps
            snaps.append(snapshot())
            flat[i] = orig - eps
            snaps.append(snapshot())
            flat[i] = orig
        losses = evaluate(snaps)
        for k, i in enumerate(ids):
            numeric[i] = (losses[2 * k] - losses[2 * k + 1]) / (2.0 * eps)
    return numeric


def toy_gradient_check(seed=1, eps=1e-5, return_details=False, chunk=32):
    """Max relative error of analytic vs central-difference gradients of the total loss.

    Every trainable entry is perturbed by +-eps and the loss re-evaluated
    through the model code.  Two shortcuts keep this fast, neither changes
    the value computed:

    * perturbed evaluations rerun only the stages downstream of the
      parameter (upstream activations are cached);
    * projection and embedding parameters only change the backbone input,
      and nothing after that couples samples, so ``chunk`` perturbed copies
      of the batch share one backbone call and each copy's loss is taken
      from its own slice.
    """
    model, ds = toy_setup(seed)
    idx = np.arange(len(ds))
    masks = ds.masks[idx]
    B = len(idx)
    y = ds.normalized_scores()[idx]
    weights = LossWeights()

    def loss_from(out):
        return total_loss(out["y_hat"], out["y_main"], out["y_aux"], y, out["H_fusion"], weights)[0]

    def full():
        return loss_from(model(ds, idx, train=True))

    params = {n: p for n, p in model.named_parameters().items() if p.requires_grad}
    for p in params.values():
        p.grad = None
    loss = full()
    loss.backward()
    analytic = {n: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for n, p in params.items()}

    with no_grad():
        proj = model.project(ds, idx, masks, train=True)
        H, layouts = model.encode(proj, masks, train=True)

    def from_proj():
        H2, lay = model.encode(proj, masks, train=True)
        return loss_from(model.heads(H2, lay, masks, train=True))

    def from_hidden():
        return loss_from(model.heads(H, layouts, masks, train=True))

    def input_seq(stage):
        p2 = model.project(ds, idx, masks, train=True) if stage == "projection" else proj
        return model.assemble(p2, masks)[0].data.copy()

    base_seq = input_seq("backbone")

    def batched_losses(seqs, positions=None):
        n = len(seqs)
        pos = None if positions is None else Tensor(np.repeat(np.stack(positions), B, axis=0))
        Hb = model.backbone(Tensor(np.concatenate(seqs, axis=0)), train=True, positions=pos)
        out = model.heads(Hb, layouts * n, np.tile(masks, (n, 1)), train=True)
        losses = []
        for c in range(n):
            sl = slice(c * B, (c + 1) * B)
            part = {k: None if out[k] is None else out[k][sl] for k in ("y_hat", "y_main", "y_aux", "H_fusion")}
            losses.append(float(loss_from(part).data))
        return losses

    with no_grad():
        base_loss = batched_losses([base_seq])[0]

    def seq_losses(seqs):
        # a perturbed row that no position reads leaves the input bitwise
        # unchanged, so its loss is the unperturbed one
        fresh = [j for j, q in enumerate(seqs) if not np.array_equal(q, base_seq)]
        losses = [base_loss] * len(seqs)
        for j, v in zip(fresh, batched_losses([seqs[j] for j in fresh]) if fresh else ()):
            losses[j] = v
        return losses

    details = {}
    with no_grad():
        for name, p in params.items():
            stage = name.split(".")[0]
            flat = p.data.reshape(-1)
            if name == "backbone.position_embedding":
                S = base_seq.shape[1]
                numeric = _batched_differences(
                    flat, eps, chunk, lambda: p.data[:S].copy(),
                    lambda tables: batched_losses([base_seq] * len(tables), tables),
                )
            elif stage == "projection" or name == "backbone.token_embedding":
                numeric = _batched_differences(flat, eps, chunk, lambda: input_seq(stage), seq_losses)
            else:
                fn = from_proj if stage == "backbone" else from_hidden
                numeric = np.empty(flat.size)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = float(fn().data)
                    flat[i] = orig - eps
                    down = float(fn().data)
                    flat[i] = orig
                    numeric[i] = (up - down) / (2.0 * eps)
            if not np.all(np.isfinite(numeric)):
                raise NonFiniteLossError(f"toy_gradient_check: non-finite perturbed loss for {name}")
            details[name] = float(relative_error(analytic[name].reshape(-1), numeric).max())
    worst = max(details.values())
    if return_details:
        return worst, details, sum(p.size for p in params.values())
    return worst


__all__ = [
    "RunResult",
    "make_split",
    "model_config_for",
    "run",
    "run_suite",
    "toy_gradient_check",
    "toy_setup",
]
