"""Slow reference implementations used only by the tests."""
import itertools

import numpy as np
from scipy.special import logsumexp


def collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_force_ctc(logits, target):
    """-log p(target) by summing over every frame-level path."""
    steps, n_cls = logits.shape
    blank = n_cls - 1
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    target = tuple(target)
    terms = [
        sum(logp[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(n_cls), repeat=steps)
        if collapse(path, blank) == target
    ]
    return -logsumexp(terms) if terms else np.inf


def all_targets(n_labels, max_len):
    for length in range(max_len + 1):
        yield from itertools.product(range(n_labels), repeat=length)


def central_difference(f, x, idx, h=1e-4):
    up, down = x.copy(), x.copy()
    up[idx] += h
    down[idx] -= h
    return (f(up) - f(down)) / (2 * h)


def brute_erode(mask):
    h, w = mask.shape
    pad = np.pad(mask, 1, constant_values=False)
    return np.array([[pad[i : i + 3, j : j + 3].all() for j in range(w)] for i in range(h)])


def brute_dilate(mask):
    h, w = mask.shape
    pad = np.pad(mask, 1, constant_values=False)
    return np.array([[pad[i : i + 3, j : j + 3].any() for j in range(w)] for i in range(h)])


def flood_components(mask):
    """4-connected components by breadth-first search, as sets of pixels."""
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                stack, comp = [(i, j)], set()
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp.add((a, b))
                    for y, x in ((a - 1, b), (a + 1, b), (a, b - 1), (a, b + 1)):
                        if 0 <= y < h and 0 <= x < w and mask[y, x] and not seen[y, x]:
                            seen[y, x] = True
                            stack.append((y, x))
                comps.append(comp)
    return comps
