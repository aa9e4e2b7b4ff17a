"""Independent oracles: finite differences, naive loop references, and the
optimal discriminator on finite histograms.

The naive references use Python scalars and loops only, so they share no
code with the vectorized implementations they are compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import OracleError, SizeError
from .tensor import Tensor, backward


@dataclass
class FiniteDiffReport:
    max_rel: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    worst: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def overall_rel(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    @property
    def overall_abs(self) -> float:
        return max(self.max_abs.values(), default=0.0)

    def passed(self, rel: float = 1e-4) -> bool:
        return self.overall_rel < rel


def finite_diff(loss_fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
                epsilon: float = 1e-5, atol: float = 1e-7) -> FiniteDiffReport:
    """Compare backward gradients against central differences.

    ``loss_fn`` rebuilds the loss from the current contents of ``params``;
    each coordinate is perturbed in place and restored. A coordinate counts
    toward the relative error only when its absolute error exceeds ``atol``.
    """
    if not epsilon > 0:
        raise OracleError("epsilon must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    base = loss_fn()
    again = loss_fn()
    if base.item() != again.item():
        raise OracleError("loss_fn is not deterministic")
    grads = backward(base)
    report = FiniteDiffReport()
    for name, p in params.items():
        analytic = grads[p.node].data if p.node in grads else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst_rel, worst_abs, worst_at = 0.0, 0.0, ()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_fn().item()
            flat[k] = orig - epsilon
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric)
            rel = 0.0 if err <= atol else err / max(abs(a), abs(numeric))
            worst_abs = max(worst_abs, err)
            if k == 0 or rel > worst_rel:
                worst_rel, worst_at = rel, np.unravel_index(k, p.data.shape)
        report.max_rel[name] = worst_rel
        report.max_abs[name] = worst_abs
        report.worst[name] = tuple(int(i) for i in worst_at)
    return report


# ----------------------------------------------------------------------------
# naive references

def naive_matmul(a, b) -> list[list[float]]:
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    if len(a[0]) != len(b):
        raise SizeError("inner dimensions differ")
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            s = 0.0
            for k in range(len(b)):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return out


def naive_conv_forward(inp, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Seven nested loops over (n, o, y, x, i, ky, kx)."""
    x = np.asarray(inp, dtype=np.float64).tolist()
    w = np.asarray(kernel, dtype=np.float64).tolist()
    n, c, h, wd = np.shape(inp)
    o, ci, kh, kw = np.shape(kernel)
    if c != ci:
        raise SizeError("channel mismatch")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise SizeError("empty output")
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for y in range(oh):
                for xx in range(ow):
                    s = 0.0
                    for ch in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = y * stride + ky - padding
                                ix = xx * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < wd:
                                    s += x[b][ch][iy][ix] * w[f][ch][ky][kx]
                    out[b, f, y, xx] = s
    return out


def naive_pool(inp, kind: str, window: int, stride: int) -> np.ndarray:
    x = np.asarray(inp, dtype=np.float64)
    n, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    vals = [float(x[b, ch, y * stride + i, xx * stride + j])
                            for i in range(window) for j in range(window)]
                    out[b, ch, y, xx] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def softmax_reference(logits: Sequence[float], tau: float, digits: int = 50) -> list[float]:
    """Softmax of ``logits / tau`` evaluated with mpmath at ``digits`` precision."""
    import mpmath

    with mpmath.workdps(digits):
        e = [mpmath.exp(mpmath.mpf(float(z)) / mpmath.mpf(float(tau))) for z in logits]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


def cross_entropy_reference(logits: Sequence[float], label: int) -> float:
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[label]


# ----------------------------------------------------------------------------
# optimal discriminator on finite supports

def _check_hist(p) -> list[float]:
    p = [float(v) for v in p]
    if any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
        raise OracleError("histogram must be nonnegative and sum to 1")
    return p


def discriminator_optimum(p_labeled, p_unlabeled) -> np.ndarray:
    """D*(x) = p_l(x) / (p_l(x) + p_u(x)); NaN where both masses are zero."""
    pl, pu = _check_hist(p_labeled), _check_hist(p_unlabeled)
    if len(pl) != len(pu):
        raise OracleError("histograms have different supports")
    out = []
    for a, b in zip(pl, pu):
        out.append(a / (a + b) if a + b > 0 else math.nan)
    return np.array(out)


def train_tabular_discriminator(p_labeled, p_unlabeled, steps: int = 2000, lr: float = 4.0,
                                balance: float = 1.0) -> np.ndarray:
    """Gradient-train one logit per bin on the expected discriminator loss.

    The loss is the population form of the minibatch discriminator loss:
    ``-(balance * sum_x p_l(x) log D(x) + sum_x p_u(x) log(1 - D(x)))``.
    Each bin's step is divided by its total mass so that rare bins converge
    as fast as common ones; this diagonal preconditioner leaves the
    minimizer unchanged.
    """
    from . import tensor as T

    pl = np.asarray(_check_hist(p_labeled))
    pu = np.asarray(_check_hist(p_unlabeled))
    mass = balance * pl + pu
    scale = np.divide(1.0, mass, out=np.zeros_like(mass), where=mass > 0)
    theta = Tensor(np.zeros(len(pl)), True)
    for _ in range(steps):
        lab = T.reduce_sum(T.mul(T.log_sigmoid(theta), Tensor(pl)))
        unl = T.reduce_sum(T.mul(T.log_sigmoid(T.neg(theta)), Tensor(pu)))
        loss = T.neg(T.add(T.scale(lab, balance), unl))
        g = backward(loss)[theta.node].data
        theta = Tensor(theta.data - lr * scale * g, True)
    return 1.0 / (1.0 + np.exp(-theta.data))
