"""Central finite-difference gradient oracle, independent of autograd.

Perturbs tensor entries in place by +/- eps and differences the loss; used
to check analytic gradients of every parameterized operation at 64-bit.
"""

import numpy as np
import torch


def fd_gradient(loss_fn, tensor, eps=1e-5, entries=None):
    """FD gradient of ``loss_fn()`` w.r.t. selected flat entries of ``tensor``.

    Returns (indices, fd_values). ``entries=None`` sweeps every entry.
    """
    flat = tensor.data.view(-1)
    if entries is None:
        entries = range(flat.numel())
    vals = []
    for i in entries:
        orig = flat[i].item()
        flat[i] = orig + eps
        lp = float(loss_fn())
        flat[i] = orig - eps
        lm = float(loss_fn())
        flat[i] = orig
        vals.append((lp - lm) / (2.0 * eps))
    return list(entries), torch.tensor(vals, dtype=tensor.dtype)


def select_entries(tensor, max_entries, rng):
    n = tensor.numel()
    if n <= max_entries:
        return range(n)
    return sorted(rng.choice(n, size=max_entries, replace=False).tolist())


def max_rel_err(analytic_flat, idxs, fd_vals, floor=1e-8):
    a = analytic_flat[list(idxs)].double()
    f = fd_vals.double()
    scale = torch.maximum(torch.maximum(a.abs(), f.abs()), torch.full_like(a, floor))
    return float(((a - f).abs() / scale).max())


def check_model_gradients(model, loss_fn, eps=1e-5, max_entries_per_tensor=None, seed=0, tol=1e-4):
    """Compare autograd parameter gradients of ``loss_fn()`` against central
    differences; returns {param_name: max relative error}."""
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    errs = {}
    for name, p in model.named_parameters():
        assert p.grad is not None, f"no gradient reached {name}"
        entries = (
            None
            if max_entries_per_tensor is None
            else select_entries(p, max_entries_per_tensor, rng)
        )
        idxs, fd_vals = fd_gradient(loss_fn, p, eps=eps, entries=entries)
        errs[name] = max_rel_err(p.grad.view(-1), idxs, fd_vals)
    return errs
