"""MSE loss, Adam optimizer and the epoch-driven training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import Network, prepare_batch
from .ops import OpError


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries the offending epoch and batch."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 18
    lr: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    report_every: int = 0  # epochs between progress lines; 0 = silent

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise OpError("epochs and batch_size must be >= 1")


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over all entries of the squared residual, plus its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise OpError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def to_tensors(self) -> dict:
        out = {"adam.t": np.array([float(self.t)])}
        for k in self.m:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, params: dict, tensors: dict, lr: float,
                     beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        state = cls(params, lr, beta1, beta2, eps)
        state.t = int(tensors["adam.t"][0])
        for k in params:
            state.m[k] = np.array(tensors[f"{k}.m"], dtype=np.float64).reshape(params[k].shape)
            state.v[k] = np.array(tensors[f"{k}.v"], dtype=np.float64).reshape(params[k].shape)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    if set(params) != set(grads):
        missing = set(params) - set(grads)
        extra = set(grads) - set(params)
        raise OpError(f"gradient keys mismatch: missing {missing}, extra {extra}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mae_units: float
    val_rmae: float
    wall_ms: float


def predict(net: Network, sequences: np.ndarray, batch_size: int = 18) -> np.ndarray:
    """Forward a whole dataset in batches; returns ``[N,3]`` predictions."""
    outs = []
    for lo in range(0, sequences.shape[0], batch_size):
        xb = prepare_batch(net.spec.mode, sequences[lo : lo + batch_size])
        outs.append(net.forward(xb))
    return np.concatenate(outs, axis=0)


def _val_metrics(net, val, batch_size, scale_um):
    pred = predict(net, val.sequences, batch_size)
    err = np.abs(pred - val.targets)
    mae_units = float(err.mean())
    mae_um = float((err * scale_um[None, :]).mean())
    # targets are normalized by the train-split std, so per-axis |err| in
    # units is already relative to the target standard deviation
    rmae = mae_units
    return mae_units, rmae, mae_um


def fit(net: Network, train, val, cfg: TrainConfig, log=None):
    """Train with Adam on MSE; keeps the parameters of the best val epoch.

    ``train``/``val`` are datasets with ``sequences [N,T,D,H,W,C]`` and
    normalized ``targets [N,3]``. Returns ``(net, history)``.
    """
    if train.sequences.shape[0] == 0 or val.sequences.shape[0] == 0:
        raise OpError("datasets must be non-empty")
    params = net.parameters()
    state = AdamState(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    scale_um = np.asarray(train.normalization.scale_um())
    n = train.sequences.shape[0]
    history: list[EpochRecord] = []
    best_mae = np.inf
    best_params = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sq_sum = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            xb = prepare_batch(net.spec.mode, train.sequences[idx])
            yb = train.targets[idx]
            pred = net.forward(xb)
            loss, grad = mse_loss(pred, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            _, grads = net.backward(grad, need_dx=False)
            adam_step(params, grads, state)
            sq_sum += loss * idx.size
        train_mse = sq_sum / n
        val_mae_units, val_rmae, val_mae_um = _val_metrics(net, val, cfg.batch_size, scale_um)
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append(EpochRecord(epoch, train_mse, val_mae_units, val_rmae, wall_ms))
        if val_mae_um < best_mae:
            best_mae = val_mae_um
            best_params = {k: v.copy() for k, v in params.items()}
        if log is not None and cfg.report_every and (
            epoch % cfg.report_every == 0 or epoch == cfg.epochs
        ):
            log(f"epoch {epoch}/{cfg.epochs} train_mse {train_mse:.3e} "
                f"val_mae {val_mae_units:.4f} ({val_mae_um:.1f} um) {wall_ms:.0f} ms")
    if best_params is not None:
        for k, p in params.items():
            np.copyto(p, best_params[k])
    return net, history


HISTORY_COLUMNS = ("epoch", "train_mse", "val_mae_units", "val_rmae", "wall_ms")


def history_to_csv(history, path) -> None:
    with open(path, "w") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in history:
            f.write(f"{r.epoch},{r.train_mse:.10g},{r.val_mae_units:.10g},"
                    f"{r.val_rmae:.10g},{r.wall_ms:.10g}\n")
