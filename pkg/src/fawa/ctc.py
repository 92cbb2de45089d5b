"""CTC loss in log space and best-path decoding.

The blank class sits at the last index of the logits (``V`` for a
vocabulary of ``V`` symbols).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "InfeasibleTargetError",
    "required_frames",
    "ctc_loss",
    "ctc_loss_batch",
    "greedy_path",
    "greedy_decode",
    "best_alignment",
]


class InfeasibleTargetError(ValueError):
    """The label sequence cannot be aligned to the available frames."""


def required_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ctc_loss(logits: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. raw logits.

    ``logits`` is ``(T, V + 1)``. Runs the forward-backward recursion over
    the blank-interleaved label sequence.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"logits must be (T, V+1) with T >= 1, got {logits.shape}")
    steps, n_cls = logits.shape
    blank = n_cls - 1
    target = [int(t) for t in target]
    if any(t < 0 or t >= blank for t in target):
        raise ValueError(f"target labels must lie in [0, {blank - 1}]: {target}")
    need = required_frames(target)
    if need > steps:
        raise InfeasibleTargetError(
            f"infeasible target: {len(target)} labels need {need} frames, only {steps} available"
        )

    logp = _log_softmax(logits)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    n_states = ext.size
    # skip transition s-2 -> s allowed into a label that differs from the previous label
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((steps, n_states), neg_inf)
    alpha[0, 0] = logp[0, blank]
    if n_states > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logp[t, ext]

    # beta[t, s]: log-prob of finishing from state s at t, emissions after t only
    beta = np.full((steps, n_states), neg_inf)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if n_states > 1 else alpha[-1, -1]
    if not np.isfinite(log_p):
        raise InfeasibleTargetError("infeasible target: no alignment has nonzero probability")

    occupancy = np.exp(alpha + beta - log_p)
    posterior = np.zeros_like(logits)
    for s in range(n_states):
        posterior[:, ext[s]] += occupancy[:, s]
    grad = np.exp(logp) - posterior
    return float(-log_p), grad


def ctc_loss_batch(
    logits: Tensor,
    targets: Sequence[Sequence[int]],
    reduction: str = "sum",
    lengths: Sequence[int] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Differentiable CTC over a batch ``(N, T, V + 1)``.

    ``reduction`` is ``"sum"`` (items stay independent, used by attacks)
    or ``"mean"`` (used for training). ``lengths`` limits item ``k`` to its
    first ``lengths[k]`` frames; later frames get zero gradient. Also
    returns the per-item losses.
    """
    if logits.ndim != 3 or logits.shape[0] != len(targets):
        raise ValueError(f"logits {logits.shape} do not match {len(targets)} targets")
    steps = logits.shape[1]
    lengths = [steps] * len(targets) if lengths is None else [int(v) for v in lengths]
    if len(lengths) != len(targets) or any(not 0 < v <= steps for v in lengths):
        raise ValueError(f"lengths {lengths} do not fit {steps} frames")
    losses = np.empty(logits.shape[0])
    grads = np.zeros_like(logits.data)
    for k, tgt in enumerate(targets):
        losses[k], grads[k, : lengths[k]] = ctc_loss(logits.data[k, : lengths[k]], tgt)
    scale = 1.0 / len(targets) if reduction == "mean" else 1.0
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    out = Tensor(losses.sum() * scale, (logits,), "ctc", lambda g: (grads * (g * scale),))
    return out, losses


def greedy_path(logits: np.ndarray) -> list[int]:
    """Collapse repeats of the per-frame argmax and drop blanks."""
    logits = np.asarray(logits)
    blank = logits.shape[-1] - 1
    best = logits.argmax(axis=-1)
    out: list[int] = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits: np.ndarray, alphabet: str) -> str:
    return "".join(alphabet[k] for k in greedy_path(logits))


def best_alignment(logits: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Most probable frame-level path that collapses to ``target``.

    Returns, for each frame, the index into ``target`` being emitted, or -1
    for a blank frame.
    """
    logits = np.asarray(logits, dtype=np.float64)
    steps, n_cls = logits.shape
    blank = n_cls - 1
    target = [int(t) for t in target]
    if required_frames(target) > steps:
        raise InfeasibleTargetError(f"infeasible target for {steps} frames: {target}")
    logp = _log_softmax(logits)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    n_states = ext.size
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    score = np.full((steps, n_states), -np.inf)
    back = np.zeros((steps, n_states), dtype=np.int64)
    score[0, 0] = logp[0, blank]
    if n_states > 1:
        score[0, 1] = logp[0, ext[1]]
    states = np.arange(n_states)
    for t in range(1, steps):
        prev = score[t - 1]
        cand = np.stack([prev, np.r_[-np.inf, prev[:-1]], np.r_[-np.inf, -np.inf, prev[:-2]]])
        cand[2, ~skip] = -np.inf
        k = cand.argmax(axis=0)
        score[t] = cand[k, states] + logp[t, ext]
        back[t] = states - k
    if n_states > 1 and score[-1, -2] > score[-1, -1]:
        s = n_states - 2
    else:
        s = n_states - 1
    path = np.empty(steps, dtype=np.int64)
    for t in range(steps - 1, -1, -1):
        path[t] = s
        s = back[t, s]
    return np.where(path % 2 == 1, (path - 1) // 2, -1)
