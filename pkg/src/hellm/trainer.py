"""Optimization and experiment protocol: Adam, the pre-training loop,
early stopping on development loss, grid search, and multi-seed reports.

Training is single-threaded and fully deterministic for a fixed seed:
weight init, batch order, and dropout all derive from the one seed. No
learning-rate schedule is applied (constant rate); gradient clipping is
available but off by default.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bert import BertConfig, EncoderWeights, init_weights, pretrain_loss
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DataError
from .pretrain_data import PretrainInstance


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step count."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], lr: float, **hyper) -> "AdamState":
        state = cls(lr=lr, **hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place; epsilon sits outside
    the square root: step = -lr * m_hat / (sqrt(v_hat) + eps)."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name in sorted(params):
        g = grads[name]
        if not np.isfinite(g).all():
            raise ContractError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        params[name].data -= update.astype(params[name].data.dtype, copy=False)
    return params, state


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gather accumulated gradients; parameters that never entered the
    tape contribute zeros."""
    return {
        name: t.grad if t.grad is not None else np.zeros_like(t.data)
        for name, t in params.items()
    }


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# Pre-training loop


@dataclass(frozen=True)
class PretrainRunConfig:
    """Loop controls for masked-LM pre-training."""

    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    clip_norm: float | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def _index_stream(n: int, rng: np.random.Generator):
    while True:
        for i in rng.permutation(n):
            yield int(i)


def pretrain_step(
    batch: Sequence[PretrainInstance],
    weights: EncoderWeights,
    model_config: BertConfig,
    state: AdamState,
    drop_rng: np.random.Generator,
    clip_norm: float | None = None,
) -> float:
    """One optimizer step on a batch; returns the mean batch loss."""
    weights.zero_grads()
    with Tape() as tape:
        total = None
        for inst in batch:
            loss, _ = pretrain_loss(
                inst, weights, model_config, mode="train", rng=drop_rng
            )
            total = loss if total is None else ad.add(total, loss)
        mean = ad.scale(total, 1.0 / len(batch))
        tape.backward(mean)
    grads = collect_grads(weights.params)
    if clip_norm is not None:
        clip_gradients(grads, clip_norm)
    adam_step(weights.params, grads, state)
    return float(mean.data)


def pretrain(
    instances: Sequence[PretrainInstance],
    model_config: BertConfig,
    run: PretrainRunConfig,
    out_dir: str | Path | None = None,
) -> tuple[EncoderWeights, list[tuple[int, float]]]:
    """Train from scratch over shuffled batches of masked instances.

    Returns the final weights and the loss curve as (step, loss) pairs.
    When out_dir is given, writes checkpoint_final.hlm, loss_curve.csv,
    and (if checkpoint_every > 0) periodic checkpoint_NNNNNN.hlm files.
    """
    if not instances:
        raise DataError("pre-training needs at least one instance")
    seeds = np.random.SeedSequence(run.seed).generate_state(3)
    weights = init_weights(model_config, int(seeds[0]))
    order_rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2])
    state = AdamState.create(weights.params, run.lr)
    stream = _index_stream(len(instances), order_rng)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(name: str) -> None:
        if out is not None:
            save_checkpoint(out / name, weights.params, asdict(model_config))

    curve: list[tuple[int, float]] = []
    for step in range(1, run.steps + 1):
        batch = [instances[next(stream)] for _ in range(run.batch_size)]
        loss = pretrain_step(
            batch, weights, model_config, state, drop_rng, run.clip_norm
        )
        curve.append((step, loss))
        if run.checkpoint_every and step % run.checkpoint_every == 0:
            checkpoint(f"checkpoint_{step:06d}.hlm")
    checkpoint("checkpoint_final.hlm")
    if out is not None:
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(curve)
    return weights, curve


def evaluate_pretrain(
    instances: Sequence[PretrainInstance],
    weights: EncoderWeights,
    model_config: BertConfig,
) -> dict[str, float]:
    """Eval-mode MLM/NSP accuracy and mean joint loss over a dataset."""
    if not instances:
        raise DataError("evaluation needs at least one instance")
    mlm_correct = mlm_total = nsp_correct = 0
    losses = []
    for inst in instances:
        loss, stats = pretrain_loss(inst, weights, model_config, mode="eval")
        losses.append(float(loss.data))
        mlm_correct += stats.mlm_correct
        mlm_total += stats.mlm_total
        nsp_correct += int(stats.nsp_correct)
    return {
        "mlm_accuracy": mlm_correct / mlm_total,
        "nsp_accuracy": nsp_correct / len(instances),
        "mean_loss": float(np.mean(losses)),
    }


# ---------------------------------------------------------------------------
# Early stopping


@dataclass(frozen=True)
class EarlyStopResult:
    """Outcome of a patience-based training loop."""

    best_loss: float
    best_epoch: int  # 1-indexed
    best_state: Any
    n_evaluations: int
    trace: tuple[float, ...]


def run_early_stopping(
    train_epoch: Callable[[int], tuple[float, Any]],
    patience: int = 3,
    max_epochs: int | None = None,
) -> EarlyStopResult:
    """Call train_epoch(epoch) -> (dev_loss, state snapshot) until the
    loss fails to improve for `patience` consecutive evaluations, then
    return the best snapshot observed. Improvement means strictly lower
    loss. max_epochs is an optional safety bound; by default the loop
    runs until patience is exhausted.
    """
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    best_loss = math.inf
    best_state: Any = None
    best_epoch = 0
    bad = 0
    trace: list[float] = []
    epoch = 0
    while max_epochs is None or epoch < max_epochs:
        epoch += 1
        loss, snapshot = train_epoch(epoch)
        loss = float(loss)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_state, best_epoch = loss, snapshot, epoch
            bad = 0
        else:
            bad += 1
        if bad >= patience:
            break
    if best_epoch == 0:
        raise DataError("early stopping saw no evaluations")
    return EarlyStopResult(
        best_loss=best_loss,
        best_epoch=best_epoch,
        best_state=best_state,
        n_evaluations=len(trace),
        trace=tuple(trace),
    )


def snapshot_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Copy parameter values for later restoration."""
    return {name: t.data.copy() for name, t in params.items()}


def restore_params(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, t in params.items():
        t.data[...] = snapshot[name]


# ---------------------------------------------------------------------------
# Grid search and seed repeats


@dataclass(frozen=True)
class GridSpec:
    """Named axes of finite candidate values; enumeration order is the
    Cartesian product with the leftmost axis varying slowest."""

    axes: dict[str, list]

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("grid needs at least one axis")
        for name, values in self.axes.items():
            if not values:
                raise ConfigError(f"grid axis {name!r} has no values")

    def points(self) -> list[dict[str, Any]]:
        names = list(self.axes)
        return [
            dict(zip(names, combo))
            for combo in itertools.product(*(self.axes[n] for n in names))
        ]


def grid_search(
    space: GridSpec,
    train_and_eval: Callable[[dict, int], float],
    patience: int = 3,
) -> tuple[dict, list[dict]]:
    """Evaluate every grid point with train_and_eval(config, patience)
    and return (best config, full table). The winner is the minimum dev
    loss; ties resolve to the earlier enumeration order. Points that
    raise are recorded in the table; if all fail, raises."""
    points = space.points()
    table: list[dict] = []
    best: tuple[float, int] | None = None
    best_config: dict | None = None
    failures = []
    for index, point in enumerate(points):
        try:
            dev_loss = float(train_and_eval(dict(point), patience))
        except Exception as exc:  # noqa: BLE001 - recorded, re-raised in aggregate
            table.append({"config": point, "error": str(exc)})
            failures.append(f"{point}: {exc}")
            continue
        table.append({"config": point, "dev_loss": dev_loss})
        if best is None or dev_loss < best[0]:
            best = (dev_loss, index)
            best_config = point
    if best_config is None:
        raise DataError(
            "every grid point failed: " + "; ".join(failures)
        )
    return best_config, table


@dataclass(frozen=True)
class RunReport:
    """Final-metric summary over repeated seeded runs."""

    seeds: tuple[int, ...]
    values: tuple[float, ...]
    mean: float
    std: float  # unbiased, n-1 denominator
    n: int


def repeat_with_seeds(
    train_fn: Callable[[int], float],
    seeds: Iterable[int],
) -> RunReport:
    """Run train_fn once per seed and summarize the returned metric."""
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ConfigError("repeat_with_seeds needs at least 2 seeds")
    values = tuple(float(train_fn(s)) for s in seeds)
    arr = np.asarray(values, dtype=np.float64)
    return RunReport(
        seeds=seeds,
        values=values,
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
        n=len(values),
    )
