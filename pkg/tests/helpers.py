"""Shared oracles for the test suite."""

import itertools

import numpy as np
import torch


def central_difference_check(loss_fn, tensors, n_coords, rng, eps=1e-6, floor=1e-6):
    """Compare autodiff with central differences on ``n_coords`` random coordinates.

    ``tensors`` is a list of float64 leaf tensors that ``loss_fn()`` reads.
    Returns the list of (autodiff, numeric, relative error) triples. The
    denominator never drops below ``floor``: round-off in the difference
    quotient is around 1e-10 here, so smaller gradients are compared absolutely.
    """
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss_fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    for t in tensors:
        t.requires_grad_(False)
    sizes = np.array([t.numel() for t in tensors])
    picks = []
    for _ in range(n_coords):
        k = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        picks.append((k, int(rng.integers(sizes[k]))))
    out = []
    with torch.no_grad():
        for k, j in picks:
            flat = tensors[k].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            ana = grads[k].view(-1)[j].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            out.append((ana, num, rel))
    return out


def brute_force_assignment(cost):
    """Minimum total cost over all injections of targets (columns) into queries (rows)."""
    cost = np.asarray(cost)
    n_q, n_t = cost.shape
    best = None
    for rows in itertools.permutations(range(n_q), n_t):
        total = sum(cost[r, c] for c, r in enumerate(rows))
        if best is None or total < best:
            best = total
    return best
