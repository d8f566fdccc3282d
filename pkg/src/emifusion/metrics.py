"""Training objective and evaluation statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .tensor import ShapeMismatchError, Tensor, scale, tensor_sum


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries: sum of squared differences
    divided by (n_samples * n_dims). Differentiable in ``pred``."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"mse_loss shapes differ: {pred.shape} vs {target.shape}"
        )
    diff = pred - target
    return scale(tensor_sum(diff * diff), 1.0 / pred.size)


def pearson(a, b) -> float:
    """Pearson correlation of two equal-length 1-D arrays.

    Returns nan when either side has zero variance; the caller decides how
    to aggregate undefined dimensions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(
            f"pearson needs matching 1-D arrays, got {a.shape} and {b.shape}"
        )
    if a.shape[0] < 2:
        raise ValueError("pearson needs at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    var_a = (da * da).mean()
    var_b = (db * db).mean()
    if var_a == 0.0 or var_b == 0.0:
        return float("nan")
    return float((da * db).mean() / math.sqrt(var_a * var_b))


@dataclass
class EvalResult:
    rho_per_dim: list
    mean_rho: float
    mse: float
    n_samples: int
    undefined_dims: list

    def format(self) -> str:
        parts = []
        for j, r in enumerate(self.rho_per_dim):
            parts.append(f"dim{j}=undefined" if math.isnan(r)
                         else f"dim{j}={r:+.4f}")
        lines = [
            f"eval over {self.n_samples} samples",
            "  rho  " + "  ".join(parts),
            f"  mean rho {self.mean_rho:+.4f}" if not math.isnan(self.mean_rho)
            else "  mean rho undefined",
            f"  mse {self.mse:.6f}",
        ]
        return "\n".join(lines)


def predict_all(model, records, batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions for a list of records, batched. Never consumes
    randomness."""
    c = model.config
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = data_mod.collate(
            chunk, d_audio=c.d_audio_in, d_vision=c.d_vision_in,
            d_text=c.d_text_in, n_targets=c.n_targets,
            max_audio_len=c.max_audio_len, max_vision_len=c.max_vision_len)
        out = model.forward_batch(batch, train=False)
        preds.append(out.data)
    return np.concatenate(preds, axis=0)


def evaluate(model, records, batch_size: int = 32) -> EvalResult:
    """Correlation per target dimension plus MSE over a whole eval set.

    Correlations are computed once over all records, never averaged over
    batches. Zero-variance dimensions are reported as undefined and left
    out of the mean.
    """
    records = list(records)
    if len(records) < 2:
        raise ValueError("evaluate needs at least two records")
    preds = predict_all(model, records, batch_size)
    targets = np.stack([r.target for r in records])
    rho = [pearson(preds[:, j], targets[:, j])
           for j in range(targets.shape[1])]
    defined = [r for r in rho if not math.isnan(r)]
    mean_rho = sum(defined) / len(defined) if defined else float("nan")
    diff = preds - targets
    mse = float((diff * diff).sum() / diff.size)
    return EvalResult(
        rho_per_dim=rho,
        mean_rho=mean_rho,
        mse=mse,
        n_samples=len(records),
        undefined_dims=[j for j, r in enumerate(rho) if math.isnan(r)],
    )
