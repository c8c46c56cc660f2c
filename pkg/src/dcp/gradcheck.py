"""Finite-difference check of the episode loss gradient.

The self-reasoning masks are thresholded, so the loss is only piecewise
smooth. A perturbation that flips a hard mask pixel makes the numerical
derivative meaningless for that coordinate, which is why callers judge the
check by the fraction of coordinates that agree rather than by the worst one.
"""

import numpy as np
import torch

from dcp.training import loss_terms


def _flat_coordinates(model, n, rng):
    params = [(name, p) for name, p in model.trainable_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[i - 1] if i else 0))
        coords.append((params[i][0], params[i][1], offset))
    return coords


def relative_errors(model, inputs, query_masks, n_params=200, eps=1e-3, seed=0, lambda1=1.0, lambda2=1.0):
    """Compare autograd and central differences on ``n_params`` random coordinates.

    Returns an array of ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-10)`` per coordinate.
    """
    s_img, s_msk, q_img = inputs

    def loss():
        out = model(s_img, s_msk, q_img)
        return loss_terms(out, s_msk, query_masks, lambda1, lambda2)[0]

    model.zero_grad()
    loss().backward()
    coords = _flat_coordinates(model, n_params, np.random.default_rng(seed))
    errors = []
    with torch.no_grad():
        for _, p, offset in coords:
            analytic = p.grad.view(-1)[offset].item()
            flat = p.data.view(-1)
            orig = flat[offset].item()
            flat[offset] = orig + eps
            up = loss().item()
            flat[offset] = orig - eps
            down = loss().item()
            flat[offset] = orig
            numeric = (up - down) / (2 * eps)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10))
    return np.asarray(errors)
