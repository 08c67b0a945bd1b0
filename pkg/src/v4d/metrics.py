"""MAE/rMAE with unit calibration, per-model evaluation, latency measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import Network, parameter_count, prepare_batch
from .ops import OpError
from .optim import predict
from .phantom import Dataset, NormalizationRecord


@dataclass
class Calibration:
    """Micrometers per normalized target unit, per axis."""

    scale_um: np.ndarray

    def __post_init__(self):
        self.scale_um = np.asarray(self.scale_um, dtype=np.float64)
        if self.scale_um.shape != (3,) or np.any(self.scale_um <= 0):
            raise OpError("calibration needs 3 strictly positive axis scales")

    @classmethod
    def from_normalization(cls, norm: NormalizationRecord) -> "Calibration":
        return cls(scale_um=norm.scale_um())


def mae(pred: np.ndarray, target: np.ndarray, cal: Calibration):
    """Mean +- population std over samples of the axis-averaged |error| in um."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise OpError(f"mae needs matching [N,3] arrays, got {pred.shape}/{target.shape}")
    per_sample = (np.abs(pred - target) * cal.scale_um[None, :]).mean(axis=1)
    return float(per_sample.mean()), float(per_sample.std())


def rmae(pred: np.ndarray, target: np.ndarray, raw_target_std):
    """MAE relative to the per-axis target standard deviation (same units)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    std = np.asarray(raw_target_std, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise OpError(f"rmae needs matching [N,3] arrays, got {pred.shape}/{target.shape}")
    if std.shape != (3,) or np.any(std <= 0):
        raise OpError("raw_target_std must be 3 strictly positive values")
    per_sample = (np.abs(pred - target) / std[None, :]).mean(axis=1)
    return float(per_sample.mean()), float(per_sample.std())


@dataclass
class EvalReport:
    family: str
    mode: str
    mae_um_mean: float
    mae_um_std: float
    rmae_mean: float
    rmae_std: float
    n_params: int
    inference_ms: float
    n_test: int
    spec: dict = field(default_factory=dict)

    CSV_COLUMNS = ("family", "mode", "mae_um_mean", "mae_um_std", "rmae_mean",
                   "rmae_std", "n_params", "inference_ms", "n_test")

    def csv_row(self) -> str:
        return (f"{self.family},{self.mode},{self.mae_um_mean:.6g},"
                f"{self.mae_um_std:.6g},{self.rmae_mean:.6g},{self.rmae_std:.6g},"
                f"{self.n_params},{self.inference_ms:.6g},{self.n_test}")


def measure_latency(net: Network, sample: np.ndarray, warmup: int = 5,
                    reps: int = 31) -> float:
    """Median wall-clock milliseconds of a single-sample forward pass."""
    if reps < 3:
        raise OpError("need at least 3 repetitions")
    batch = sample[None] if sample.shape == net.input_shape else sample
    times = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        net.forward(batch)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1e3)
    return float(np.median(times))


def evaluate(net: Network, test: Dataset, cal: Calibration,
             batch_size: int = 18, with_latency: bool = True) -> EvalReport:
    """Forward the test split, de-normalize errors, report MAE/rMAE/params/latency."""
    pred = predict(net, test.sequences, batch_size)
    mae_mean, mae_std = mae(pred, test.targets, cal)
    # normalized targets have unit per-axis std w.r.t. the train statistics
    rmae_mean, rmae_std = rmae(pred, test.targets, np.ones(3))
    inference_ms = np.nan
    if with_latency:
        sample = prepare_batch(net.spec.mode, test.sequences[:1])
        inference_ms = measure_latency(net, sample)
    return EvalReport(
        family=net.spec.family.value,
        mode=net.spec.mode.value,
        mae_um_mean=mae_mean,
        mae_um_std=mae_std,
        rmae_mean=rmae_mean,
        rmae_std=rmae_std,
        n_params=parameter_count(net),
        inference_ms=inference_ms,
        n_test=len(test),
        spec=net.spec.to_dict(),
    )
