"""Training loop: Adam optimization of the full objective, plus evaluation.

Everything is seeded through one master seed (parameter init, epoch
shuffling, dropout draws), so a (seed, config, data) triple reproduces
bit-identical parameters, history, and reports within a precision mode.

Label similarity constants are computed once over the training rows and
sliced per batch. When a penalty coefficient is zero its loss term is left
out of the autodiff graph entirely (the recorded history value is computed
detached), so a zero-alpha run updates parameters exactly like a run that
never builds the graph term.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import MultiViewDataset
from .errors import DegenerateMask, NonFiniteLoss, ShapeMismatch
from .losses import LossContext, graph_constraint_loss, masked_bce, total_loss
from .metrics import MetricsReport, compute_report
from .model import ModelConfig, ModelParams, forward, save_checkpoint


@dataclass
class TrainConfig:
    """Optimization hyperparameters and run plumbing."""

    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 10.0
    beta: float = 0.1
    seed: int = 0
    eval_every: int = 0          # 0 disables periodic evaluation
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pair losses need pairs)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("penalty coefficients must be non-negative")


class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; deterministic given its inputs."""
    state.step += 1
    t = state.step
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.adam_eps
    correct1 = 1.0 - b1**t
    correct2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / correct1) / (np.sqrt(v / correct2) + eps)
        p.data = p.data - (lr * update).astype(p.data.dtype, copy=False)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_mc: float
    l_gc: float
    l_ac: float
    view_weights: list[float]
    eval_report: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunHistory:
    """One record per completed epoch, serializable as JSON lines."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def final(self) -> EpochRecord:
        return self.records[-1]

    def save_jsonl(self, path):
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "RunHistory":
        records = []
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            records.append(EpochRecord(**d))
        return cls(records)


def _batch_views(ds: MultiViewDataset, idx: np.ndarray):
    return [x[idx] for x in ds.views]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: MultiViewDataset,
    eval_dataset: MultiViewDataset | None = None,
) -> tuple[ModelParams, RunHistory]:
    """Optimize a fresh model on the dataset; returns (params, history).

    A batch whose label mask is entirely zero is redrawn once; a second
    degenerate draw aborts. Non-finite losses abort with the failing step in
    the message.
    """
    seed_seq = np.random.SeedSequence(train_config.seed)
    init_seed, shuffle_seed, dropout_seed = seed_seq.spawn(3)
    params = ModelParams.initialize(
        model_config, dataset.view_dims, dataset.c,
        seed=int(init_seed.generate_state(1)[0]),
    )
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    ctx = LossContext.build(dataset.labels, dataset.label_mask,
                            train_config.alpha, train_config.beta)
    state = AdamState(params)
    history = RunHistory()
    n = dataset.n

    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "l_mc": 0.0, "l_gc": 0.0, "l_ac": 0.0}
        seen = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            if dataset.label_mask[idx].sum() == 0:
                idx = shuffle_rng.choice(n, size=len(idx), replace=False)
                if dataset.label_mask[idx].sum() == 0:
                    raise DegenerateMask(
                        f"epoch {epoch}: batch has no known label even after resampling"
                    )
            views_b = _batch_views(dataset, idx)
            w_b = dataset.view_mask[idx]
            y_b = dataset.labels[idx]
            g_b = dataset.label_mask[idx]
            t_b, u_b = ctx.batch(idx)

            params.zero_grads()
            with Tape() as tape:
                out = forward(views_b, w_b, params, train=True, rng=dropout_rng)
                l_mc = masked_bce(out.p_main, y_b, g_b)
                l_ac = masked_bce(out.p_tokens, y_b, g_b)
                if ctx.alpha > 0:
                    l_gc = graph_constraint_loss(out.view_states, t_b, u_b, w_b)
                    loss = total_loss(l_mc, l_gc, l_ac, ctx.alpha, ctx.beta)
                elif ctx.beta > 0:
                    loss = l_mc + ctx.beta * l_ac
                else:
                    loss = l_mc
                tape.backward(loss)
            if ctx.alpha == 0:
                # outside the tape: recorded for the history, no gradient
                l_gc = graph_constraint_loss(out.view_states, t_b, u_b, w_b)

            if not np.isfinite(loss.data):
                raise NonFiniteLoss(
                    f"epoch {epoch}, step {start // train_config.batch_size}: loss={loss.item()}"
                )
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, train_config)
            if not params.all_finite():
                raise NonFiniteLoss(
                    f"epoch {epoch}, step {start // train_config.batch_size}: "
                    "non-finite parameter after update"
                )

            k = len(idx)
            seen += k
            sums["loss"] += loss.item() * k
            sums["l_mc"] += l_mc.item() * k
            sums["l_gc"] += l_gc.item() * k
            sums["l_ac"] += l_ac.item() * k

        record = EpochRecord(
            epoch=epoch,
            loss=sums["loss"] / seen,
            l_mc=sums["l_mc"] / seen,
            l_gc=sums["l_gc"] / seen,
            l_ac=sums["l_ac"] / seen,
            view_weights=[float(a) for a in params["fusion.a"].data],
        )
        if (
            eval_dataset is not None
            and train_config.eval_every > 0
            and (epoch + 1) % train_config.eval_every == 0
        ):
            record.eval_report = evaluate(params, eval_dataset).to_dict()
        history.append(record)

    if train_config.checkpoint_path:
        save_checkpoint(params, train_config.checkpoint_path)
    return params, history


def evaluate(params: ModelParams, dataset: MultiViewDataset,
             batch_size: int = 512) -> MetricsReport:
    """Score the main head on a dataset in eval mode (no dropout).

    View availability is respected; labels are taken as full ground truth,
    so pass an uncorrupted split. Per-sample independence makes the batch
    size irrelevant to the result.
    """
    scores = np.empty((dataset.n, dataset.c))
    for start in range(0, dataset.n, batch_size):
        idx = np.arange(start, min(start + batch_size, dataset.n))
        out = forward(_batch_views(dataset, idx), dataset.view_mask[idx], params, train=False)
        scores[idx] = out.p_main.data
    if np.any(dataset.label_mask == 0):
        warnings.warn("evaluating against a dataset with masked labels; "
                      "metrics treat its zero-filled labels as ground truth")
    return compute_report(scores, dataset.labels,
                          meta={"n": dataset.n, "m": dataset.m, "c": dataset.c})
