"""Reverse-mode gradients of the lifted model loss (needs torch).

Mirrors the numpy pipeline (prefix signatures, robust scaling, Gram,
cumulative trapezoid, collocation residual) on autograd tensors so one
backward pass replaces a finite-difference sweep over every weight.
"""
from __future__ import annotations

import numpy as np

try:
    import torch
except ImportError as exc:  # pragma: no cover - exercised only without torch
    raise ImportError("the gradient tape needs torch") from exc

from .signature import IQR_EPS

torch.set_default_dtype(torch.float64)


def _mlp(flat, sizes, x):
    k, h = 0, x
    last = len(sizes) - 2
    for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = flat[k : k + a * b].reshape(a, b)
        k += a * b
        h = h @ W + flat[k : k + b]
        k += b
        if layer < last:
            h = torch.tanh(h)
    return h


def _prefix_signatures(values, depth):
    n, d = values.shape
    delta = values[1:] - values[:-1]
    P = [torch.ones(n - 1, 1)]
    for r in range(1, depth + 1):
        P.append((P[-1][:, :, None] * delta[:, None, :]).reshape(n - 1, -1) / r)
    levels = [torch.ones(n, 1)]
    for k in range(1, depth + 1):
        incr = P[k]
        for i in range(1, k):
            incr = incr + (levels[i][:-1, :, None] * P[k - i][:, None, :]).reshape(n - 1, -1)
        levels.append(torch.cat([torch.zeros(1, d**k), torch.cumsum(incr, 0)]))
    return torch.cat(levels, 1)


def _robust(rows):
    q = torch.quantile(rows, torch.tensor([0.25, 0.5, 0.75]), dim=0, interpolation="linear")
    iqr = q[2] - q[0]
    scale = torch.where(iqr < IQR_EPS, torch.ones_like(iqr), iqr)
    return (rows - q[1]) / scale


def _gram(F, spec):
    if spec.flavor == "linear":
        return F @ F.T
    sq = (F * F).sum(1)
    d2 = torch.clamp(sq[:, None] + sq[None, :] - 2.0 * F @ F.T, min=0.0)
    return torch.exp(-d2 / (2.0 * spec.sigma**2))


def _cumtrapz(dt, Y):
    panels = dt[:, None] * (Y[1:] + Y[:-1]) / 2.0
    return torch.cat([torch.zeros(1, Y.shape[1]), torch.cumsum(panels, 0)])


def model_loss_and_grad_tape(theta, alpha, problem):
    """Model loss at (theta, alpha) and its gradient in the flat network parameters."""
    from .linear_solver import _forcing_array, reduced_forcing, taylor_poly

    spec = problem.spec
    lin = spec.linear if problem.nonlinear else spec
    base = problem.base
    grid = base.grid
    m, d, n = lin.order, lin.dim, len(grid)
    f = _forcing_array(problem.forcing, n)
    A = lin.coefficient_nodes(grid, f)
    Ft = torch.from_numpy(reduced_forcing(A, lin.g, grid, f).ravel())
    At = torch.from_numpy(A)

    flat = torch.tensor(theta.flat(), requires_grad=True)
    x = torch.tensor(np.asarray(base.values))
    lifted = torch.cat([x, _mlp(flat, theta.sizes, x)], 1)
    S = _prefix_signatures(lifted, problem.kspec.depth)
    feats = _robust(S) if problem.kspec.normalization == "robust" else S
    K = _gram(feats, problem.kspec)
    dt = torch.from_numpy(np.diff(grid))
    levels = [K]
    for _ in range(m):
        levels.append(_cumtrapz(dt, levels[-1]))

    a = torch.from_numpy(np.asarray(alpha, dtype=np.float64)).reshape(n, d)
    R = torch.zeros(n, d)
    for r in range(m + 1):
        R = R + torch.einsum("jab,jb->ja", At[r], levels[m - r] @ a)
    if problem.nonlinear:
        U = [torch.from_numpy(taylor_poly(lin.g, m, m - r, grid, grid[0])) + levels[m - r] @ a
             for r in range(m)]
        R = R + spec.evaluator(U)
    R = R.reshape(-1) - Ft
    loss = (R @ R + problem.ridge * float(np.dot(alpha, alpha))) / n
    loss.backward()
    return float(loss.detach()), flat.grad.numpy().copy()
