"""Independent reference implementations used to cross-check the engine.

Everything here is deliberately naive: explicit loops, textbook formulas,
plain numpy arrays. None of it shares code with the differentiable paths it
validates, so agreement between the two is meaningful evidence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError


# -- finite differences -----------------------------------------------------


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` must be deterministic and must not retain a reference to ``x``;
    it is called twice per coordinate on perturbed copies.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    work = x.copy()
    wflat = work.reshape(-1)
    for i in range(wflat.size):
        orig = wflat[i]
        wflat[i] = orig + eps
        f_plus = float(f(work))
        wflat[i] = orig - eps
        f_minus = float(f(work))
        wflat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(
                f"finite_diff_grad: non-finite objective at coordinate {i}"
            )
        flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    """|a - b| normalized by the larger magnitude, floored to avoid 0/0."""
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckEntry:
    name: str
    n_checked: int
    max_rel_err: float
    worst_index: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format(self) -> str:
        lines = [
            f"gradient check  tolerance={self.tolerance:g}  "
            f"elapsed={self.elapsed_s:.2f}s"
        ]
        width = max((len(e.name) for e in self.entries), default=4)
        for e in self.entries:
            status = "ok  " if e.passed else "FAIL"
            lines.append(
                f"  {status} {e.name:<{width}}  coords={e.n_checked:<6d} "
                f"max_rel_err={e.max_rel_err:.3e} (flat index {e.worst_index})"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def check_gradients(loss_fn, named_params, tol: float = 1e-5,
                    eps: float = 1e-4, max_coords_per_param=None,
                    rng=None) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn`` against central differences.

    ``loss_fn`` takes no arguments, rebuilds the graph, and returns a scalar
    Tensor; it must be deterministic. ``named_params`` is a list of
    ``(name, Tensor)`` leaves. When ``max_coords_per_param`` is set, that many
    coordinates per parameter are sampled with ``rng`` instead of sweeping all.
    """
    start = time.perf_counter()
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params:
        analytic[name] = (
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        )
    report = GradCheckReport(tolerance=tol)
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            indices = range(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = sorted(
                rng.choice(n, size=max_coords_per_param, replace=False)
            )
        ana_flat = analytic[name].reshape(-1)
        max_rel = 0.0
        worst = 0
        count = 0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(
                    f"check_gradients: non-finite loss perturbing "
                    f"{name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = relative_error(ana_flat[i], numeric)
            if rel > max_rel:
                max_rel = rel
                worst = i
            count += 1
        report.entries.append(
            GradCheckEntry(name, count, max_rel, worst, max_rel <= tol)
        )
    report.elapsed_s = time.perf_counter() - start
    return report


# -- naive attention and friends --------------------------------------------


def naive_softmax(x: np.ndarray) -> np.ndarray:
    """Unshifted textbook softmax of a 1-D vector."""
    e = [math.exp(v) for v in np.asarray(x, dtype=np.float64)]
    total = sum(e)
    return np.array([v / total for v in e])


def naive_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                    mask=None, scale=None) -> np.ndarray:
    """Single-query scaled dot-product attention with explicit loops."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t = keys.shape[0]
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[0])
    if mask is None:
        valid = [True] * t
    else:
        valid = [bool(v) for v in mask]
    scores = []
    for i in range(t):
        s = 0.0
        for d in range(q.shape[0]):
            s += q[d] * keys[i, d]
        scores.append(s * scale)
    shift = max(s for s, v in zip(scores, valid) if v)
    weights = [
        math.exp(s - shift) if v else 0.0 for s, v in zip(scores, valid)
    ]
    total = sum(weights)
    weights = [w / total for w in weights]
    out = np.zeros(values.shape[1])
    for i in range(t):
        for d in range(values.shape[1]):
            out[d] += weights[i] * values[i, d]
    return out


def naive_layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                     eps: float) -> np.ndarray:
    """Row-wise layer norm of a 2-D array, one row at a time."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        row = x[r]
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        inv = 1.0 / math.sqrt(var + eps)
        out[r] = (row - mean) * inv * gain + shift
    return out


def split_heads(w: np.ndarray, heads: int):
    """Column blocks of a (d_in, d) projection, one per head."""
    dh = w.shape[1] // heads
    return [w[:, h * dh:(h + 1) * dh] for h in range(heads)]


def naive_multihead_self_attention(x: np.ndarray, mask, params: dict,
                                   heads: int, eps: float) -> np.ndarray:
    """Reference for a post-norm residual self-attention block.

    ``params`` holds plain arrays: wq, bq, wk, bk, wv, bv, wo, bo, ln_gain,
    ln_shift. Padded (mask-False) output rows are zeroed.
    """
    x = np.asarray(x, dtype=np.float64)
    t, d = x.shape
    valid = [bool(v) for v in mask]
    q_all = x @ params["wq"] + params["bq"]
    k_all = x @ params["wk"] + params["bk"]
    v_all = x @ params["wv"] + params["bv"]
    dh = d // heads
    ctx = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            ctx[i, sl] = naive_attention(
                q_all[i, sl], k_all[:, sl], v_all[:, sl], valid,
                scale=1.0 / math.sqrt(dh),
            )
    attended = ctx @ params["wo"] + params["bo"]
    out = naive_layer_norm(
        x + attended, params["ln_gain"], params["ln_shift"], eps
    )
    for i in range(t):
        if not valid[i]:
            out[i] = 0.0
    return out


def naive_single_query_cross_attention(query: np.ndarray, kv: np.ndarray,
                                       mask, params: dict,
                                       heads: int) -> np.ndarray:
    """Reference for one query vector attending over a key/value sequence.

    ``params``: optional wq/bq (absent means identity query), wk, bk, wv, bv,
    wo, bo.
    """
    query = np.asarray(query, dtype=np.float64)
    kv = np.asarray(kv, dtype=np.float64)
    if params.get("wq") is not None:
        q = query @ params["wq"] + params["bq"]
    else:
        q = query
    k_all = kv @ params["wk"] + params["bk"]
    v_all = kv @ params["wv"] + params["bv"]
    d = k_all.shape[1]
    dh = d // heads
    ctx = np.zeros(d)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        ctx[sl] = naive_attention(
            q[sl], k_all[:, sl], v_all[:, sl], mask,
            scale=1.0 / math.sqrt(dh),
        )
    return ctx @ params["wo"] + params["bo"]


# -- naive metrics ----------------------------------------------------------


def naive_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all entries of squared error, via explicit loops."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n, d = pred.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            diff = pred[i, j] - target[i, j]
            total += diff * diff
    return total / (n * d)


def naive_pearson(a, b) -> float:
    """Textbook Pearson correlation; nan when either side has zero variance."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n = len(a)
    mean_a = sum(a) / n
    mean_b = sum(b) / n
    cov = sum((x - mean_a) * (y - mean_b) for x, y in zip(a, b)) / n
    var_a = sum((x - mean_a) ** 2 for x in a) / n
    var_b = sum((y - mean_b) ** 2 for y in b) / n
    if var_a == 0.0 or var_b == 0.0:
        return float("nan")
    return cov / math.sqrt(var_a * var_b)


# -- closed-form recoverability ceiling --------------------------------------


@dataclass
class LeastSquaresReport:
    rho_per_dim: list
    mean_rho: float
    condition_number: float
    n_samples: int
    n_features: int

    def format(self) -> str:
        dims = "  ".join(f"{r:+.4f}" for r in self.rho_per_dim)
        return (
            f"least-squares readout over {self.n_samples} samples, "
            f"{self.n_features} features (cond {self.condition_number:.3e})\n"
            f"  rho per dim: {dims}\n"
            f"  mean rho:    {self.mean_rho:+.4f}"
        )


def least_squares_readout(records, ridge: float = 1e-8) -> LeastSquaresReport:
    """Ridge-regress targets from pooled raw features; an upper-bound oracle.

    Features per record: mean over frames of audio, mean over frames of
    vision, and the text vector, concatenated, with zeros for missing
    modalities, plus an intercept. Reports per-dimension Pearson correlation
    of the in-sample fit.
    """
    records = list(records)
    if not records:
        raise ValueError("least_squares_readout needs at least one record")
    rows = []
    targets = []
    for rec in records:
        parts = []
        for feat in (rec.audio, rec.vision):
            if feat is None:
                parts.append(None)
            else:
                parts.append(np.asarray(feat, dtype=np.float64).mean(axis=0))
        parts.append(
            None if rec.text is None
            else np.asarray(rec.text, dtype=np.float64)
        )
        rows.append(parts)
        targets.append(np.asarray(rec.target, dtype=np.float64))
    widths = []
    for j in range(3):
        seen = [p[j] for p in rows if p[j] is not None]
        if not seen:
            raise ValueError(
                f"least_squares_readout: modality {j} missing in every record"
            )
        widths.append(seen[0].shape[0])
    x = np.zeros((len(rows), sum(widths) + 1))
    x[:, -1] = 1.0
    offsets = np.concatenate([[0], np.cumsum(widths)])
    for i, parts in enumerate(rows):
        for j, part in enumerate(parts):
            if part is not None:
                x[i, offsets[j]:offsets[j + 1]] = part
    y = np.stack(targets)
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    theta = np.linalg.solve(gram, x.T @ y)
    pred = x @ theta
    rho = [naive_pearson(pred[:, j], y[:, j]) for j in range(y.shape[1])]
    defined = [r for r in rho if not math.isnan(r)]
    mean_rho = sum(defined) / len(defined) if defined else float("nan")
    return LeastSquaresReport(
        rho_per_dim=rho,
        mean_rho=mean_rho,
        condition_number=float(np.linalg.cond(x)),
        n_samples=x.shape[0],
        n_features=x.shape[1],
    )
