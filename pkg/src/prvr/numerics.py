"""Dense numerical kernels and the finite-difference gradient oracle.

Model code runs on float64 torch tensors and gets its gradients from
autograd. ``finite_diff_grad`` and ``grad_check`` are the independent check
on those gradients: they only ever evaluate the forward pass.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class DegenerateRowError(ValueError):
    """A softmax row has no valid position."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""


class OracleFailureError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def softmax_rows(m: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis, excluding positions where ``mask`` is False.

    Excluded positions get a logit of -inf before normalization, so they come
    out exactly zero and each row sums to one over its valid entries.
    """
    if mask is None:
        return torch.softmax(m, dim=-1)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any(dim=-1).all():
        raise DegenerateRowError("softmax row with zero valid elements")
    return torch.softmax(m.masked_fill(~mask, float("-inf")), dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # gain/bias may carry extra leading dims (stacked Gaussian blocks)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError("gain/bias length must equal the feature width")
    if not eps > 0:
        raise ValueError("eps must be positive")
    return F.layer_norm(x, (x.shape[-1],), eps=eps) * gain + bias


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine between rows of ``a`` (..., n, d) and ``b`` (..., m, d)."""
    return F.normalize(a, dim=-1, eps=1e-12) @ F.normalize(b, dim=-1, eps=1e-12).transpose(-1, -2)


def finite_diff_grad(f, p, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``.

    ``coords`` restricts evaluation to a subset of flat indices; the other
    entries of the result are left at zero.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    p = np.array(p, dtype=np.float64).ravel()
    grad = np.zeros_like(p)
    for i in range(p.size) if coords is None else coords:
        orig = p[i]
        p[i] = orig + step
        fp = f(p.copy())
        p[i] = orig - step
        fm = f(p.copy())
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    step: float
    n_checked: int = 0


def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(fn, named_tensors, step: float = 1e-5, max_coords: int | None = None,
               rng=None, floor: float = 1e-5) -> GradCheckReport:
    """Compare autograd against central differences for every named tensor.

    ``fn`` takes no arguments and returns a scalar tensor computed from the
    tensors in ``named_tensors`` (a mapping name -> float64 leaf tensor).
    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are differenced. Gradients smaller than ``floor`` are compared on an
    absolute scale, since central differences at step 1e-5 carry roundoff
    of order 1e-10.
    """
    rng = np.random.default_rng(rng)
    named = dict(named_tensors)
    for t in named.values():
        t.grad = None
        t.requires_grad_(True)
    fn().backward()
    analytic = {k: (t.grad.detach().numpy().ravel().copy() if t.grad is not None
                    else np.zeros(t.numel())) for k, t in named.items()}

    worst, worst_name, n_checked = 0.0, "", 0
    for name, t in named.items():
        data = t.data
        flat0 = data.numpy().ravel().copy()
        if max_coords is not None and flat0.size > max_coords:
            coords = np.sort(rng.choice(flat0.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat0.size)

        def f(p, data=data):
            data.copy_(torch.from_numpy(p.reshape(data.shape)))
            with torch.no_grad():
                return float(fn())

        try:
            numeric = finite_diff_grad(f, flat0, step, coords=coords)
        finally:
            data.copy_(torch.from_numpy(flat0.reshape(data.shape)))
        err = relative_error(analytic[name][coords], numeric[coords], floor)
        n_checked += len(coords)
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), name
    return GradCheckReport(worst, worst_name, step, n_checked)
