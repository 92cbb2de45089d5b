"""Gradient and optimization attacks, with or without a watermark mask.

All engines work on padded batches. A single attack is a batch of one, so
``grad_attack`` and ``batch_attack`` on one item give identical results.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .ctc import InfeasibleTargetError, required_frames
from .metrics import MetricsReport, image_metrics
from .model import CTCRecognizer, n_frames, pad_batch
from .validation import check_image, check_mask
from .watermark import (
    MAX_COLOR_GRAY,
    MIN_COLOR_GRAY,
    NoPerturbedRegionError,
    Rect,
    WatermarkSpec,
    apply_watermark,
    colorize,
    components,
    find_position,
    perturbed_region,
    render_watermark_mask,
    text_mask,
    to_gray,
)

logger = logging.getLogger(__name__)

NORMS = ("l2", "linf")
ARCTANH_CLAMP = 1e-6
# batch_attack splits work into chunks of this size no matter how many
# workers run, so results never depend on the worker count
CHUNK_SIZE = 8


def parse_norm(norm: str) -> str:
    key = str(norm).lower().replace("_", "").replace("-", "")
    if key in ("l2", "2"):
        return "l2"
    if key in ("linf", "inf", "li"):
        return "linf"
    raise ValueError(f"unknown norm {norm!r}; choose L2 or Linf")


@dataclass(frozen=True)
class GradAttackConfig:
    """Momentum iterative attack settings.

    ``alpha=None`` picks 0.05 for L2 and 0.01 for Linf.
    """

    eps: float = 0.2
    alpha: float | None = None
    mu: float = 1.0
    max_iter: int = 2000
    norm: str = "l2"
    check_every: int = 10

    def __post_init__(self):
        norm = parse_norm(self.norm)
        object.__setattr__(self, "norm", norm)
        if self.alpha is None:
            object.__setattr__(self, "alpha", 0.05 if norm == "l2" else 0.01)
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if self.max_iter < 1 or self.check_every < 1:
            raise ValueError("max_iter and check_every must be at least 1")


@dataclass(frozen=True)
class OptAttackConfig:
    """Change-of-variables attack optimized with Adam.

    With ``early_stop`` the run ends at the first verified success;
    otherwise all steps run and the closest success is returned.
    """

    c: float = 10.0
    steps: int = 1000
    lr: float = 0.01
    binary_search_steps: int = 5
    c_range: tuple[float, float] = (0.01, 100.0)
    check_every: int = 10
    early_stop: bool = False

    def __post_init__(self):
        lo, hi = self.c_range
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not 0 < lo < hi:
            raise ValueError(f"c_range must satisfy 0 < low < high, got {self.c_range}")
        if self.steps < 1 or self.check_every < 1 or self.binary_search_steps < 1:
            raise ValueError("steps, check_every and binary_search_steps must be at least 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    iterations_used: int
    predicted: str
    target: str
    metrics: MetricsReport
    failure: str | None = None
    c: float | None = None
    c_history: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {
            "success": self.success,
            "iterations": self.iterations_used,
            "target": self.target,
            "predicted": self.predicted,
            **self.metrics.as_dict(),
        }


# --------------------------------------------------------------------------
# shared batch machinery


@dataclass
class _Batch:
    x0: np.ndarray  # (N, H, Wmax), padded white
    mask: np.ndarray  # (N, H, Wmax) bool, False on padding
    widths: list[int]
    texts: list[str]
    labels: list[list[int]]
    check_views: list

    def strip(self, k: int, img: np.ndarray) -> np.ndarray:
        return img[:, : self.widths[k]].copy()

    def widths_of(self, idx) -> list[int]:
        return [self.widths[k] for k in idx]

    def reads(self, model: CTCRecognizer, k: int, logits: np.ndarray) -> bool:
        """Whether the item's own frames of ``logits`` decode to its target."""
        return model.decode_logits(logits[: n_frames(self.widths[k])]) == self.texts[k]


def _make_batch(items, model: CTCRecognizer, color_masks=None) -> _Batch:
    xs, masks, texts, labels = [], [], [], []
    for k, (x, m, t) in enumerate(items):
        x = check_image(x, f"item {k} image", height=model.height)
        xs.append(x)
        masks.append(check_mask(m, x.shape, f"item {k} mask"))
        texts.append(t)
        labels.append(model.encode(t))
    width = max(x.shape[1] for x in xs)
    mask = np.zeros((len(xs), model.height, width), dtype=bool)
    for k, m in enumerate(masks):
        mask[k, :, : m.shape[1]] = m
    views = list(color_masks) if color_masks is not None else [None] * len(xs)
    return _Batch(pad_batch(xs, width), mask, [x.shape[1] for x in xs], texts, labels, views)


def _feasible(batch: _Batch, k: int) -> bool:
    return required_frames(batch.labels[k]) <= n_frames(batch.widths[k])


def quantize_within(x: np.ndarray, x0: np.ndarray, mask: np.ndarray, eps: float | None) -> np.ndarray:
    """Round to the 8-bit grid, staying inside the eps box and the mask."""
    q = np.rint(x * 255.0) / 255.0
    if eps is not None:
        lo = np.ceil((x0 - eps) * 255.0 - 1e-9) / 255.0
        hi = np.floor((x0 + eps) * 255.0 + 1e-9) / 255.0
        q = np.clip(q, lo, hi)
    q = np.clip(q, 0.0, 1.0)
    return np.where(mask, q, x0)


def _color_range(quantize: bool) -> tuple[float, float]:
    """Grays a fixed-red colour can express, on the 8-bit grid when quantizing."""
    if quantize:
        return np.ceil(MIN_COLOR_GRAY * 255.0) / 255.0, np.floor(MAX_COLOR_GRAY * 255.0) / 255.0
    return MIN_COLOR_GRAY, MAX_COLOR_GRAY


class _Checker:
    """Turns a working iterate into a final candidate and verifies it."""

    def __init__(self, batch: _Batch, model: CTCRecognizer, quantize: bool, eps: float | None):
        self.b, self.model, self.quantize, self.eps = batch, model, quantize, eps

    def candidate(self, k: int, x: np.ndarray) -> np.ndarray:
        cand = self.b.strip(k, x)
        if self.quantize:
            x0 = self.b.strip(k, self.b.x0[k])
            mask = self.b.mask[k, :, : self.b.widths[k]]
            cand = quantize_within(cand, x0, mask, self.eps)
        view = self.b.check_views[k]
        if view is not None:
            # keep colour-checked pixels where a fixed-red colour can express them
            cand = np.where(view, np.clip(cand, *_color_range(self.quantize)), cand)
        return cand

    def views(self, k: int, cand: np.ndarray) -> list[np.ndarray]:
        out = [cand]
        if self.b.check_views[k] is not None:
            out.append(to_gray(colorize(cand, self.b.check_views[k])))
        return out

    def verify(self, k: int, cand: np.ndarray) -> bool:
        preds = self.model.predict(self.views(k, cand))
        return all(p == self.b.texts[k] for p in preds)

    def result(self, k, cand, success, iters, failure=None) -> AttackResult:
        x0 = self.b.strip(k, self.b.x0[k])
        return AttackResult(
            adversarial=cand,
            success=success,
            iterations_used=iters,
            predicted=self.model.predict([cand])[0],
            target=self.b.texts[k],
            metrics=image_metrics(x0, cand),
            failure=failure,
        )


# --------------------------------------------------------------------------
# gradient attack


def _grad_engine(batch: _Batch, model: CTCRecognizer, cfg: GradAttackConfig, quantize: bool) -> list[AttackResult]:
    n = len(batch.widths)
    chk = _Checker(batch, model, quantize, cfg.eps)
    x0, mask = batch.x0, batch.mask
    x = x0.copy()
    g = np.zeros_like(x)
    results: list[AttackResult | None] = [None] * n
    for k in range(n):
        if not _feasible(batch, k):
            results[k] = chk.result(k, chk.candidate(k, x0[k]), False, 0, "infeasible target")
    active = [k for k in range(n) if results[k] is None]

    for i in range(cfg.max_iter + 1):
        if not active:
            break
        idx = np.array(active)
        last = i == cfg.max_iter
        if last:
            logits = model.forward_batch(x[idx], batch.widths_of(idx))
        else:
            _, grad, logits = model.loss_and_input_grad(x[idx], [batch.labels[k] for k in idx], batch.widths_of(idx))
        if i % cfg.check_every == 0 or last:
            for j, k in enumerate(idx):
                if not batch.reads(model, k, logits[j]):
                    continue
                cand = chk.candidate(k, x[k])
                if chk.verify(k, cand):
                    results[k] = chk.result(k, cand, True, i)
        if last:
            break
        for j, k in enumerate(idx):
            if results[k] is not None:
                continue
            gk = grad[j]
            l1 = float(np.abs(gk).sum())
            if l1 == 0.0 or not math.isfinite(l1):
                results[k] = chk.result(k, chk.candidate(k, x[k]), False, i, "zero gradient")
                continue
            g[k] = cfg.mu * g[k] + gk / l1
            if cfg.norm == "l2":
                gnorm = float(np.sqrt((g[k] ** 2).sum()))
                step = np.where(mask[k], cfg.alpha * g[k] / gnorm, 0.0)
            else:
                step = np.where(mask[k], cfg.alpha * np.sign(g[k]), 0.0)
            # descend the target loss; clip the accumulated perturbation
            moved = np.clip(x0[k] + np.clip(x[k] - step - x0[k], -cfg.eps, cfg.eps), 0.0, 1.0)
            x[k] = np.where(mask[k], moved, x0[k])
        active = [k for k in active if results[k] is None]

    for k in range(n):
        if results[k] is None:
            results[k] = chk.result(k, chk.candidate(k, x[k]), False, cfg.max_iter, "iteration budget exhausted")
    return results


# --------------------------------------------------------------------------
# optimization attack


def _opt_engine(
    batch: _Batch, model: CTCRecognizer, cfg: OptAttackConfig, cs: np.ndarray, quantize: bool
) -> list[AttackResult]:
    n = len(batch.widths)
    chk = _Checker(batch, model, quantize, None)
    x0, mask = batch.x0, batch.mask
    # box of the tanh variable: [0, 1], narrowed to the colourable grays on colour-checked pixels
    lo, hi = np.zeros_like(x0), np.ones_like(x0)
    clo, chi = _color_range(quantize)
    for k, view in enumerate(batch.check_views):
        if view is not None:
            lo[k, :, : batch.widths[k]][view] = clo
            hi[k, :, : batch.widths[k]][view] = chi
    span = hi - lo
    base = np.arctanh(2.0 * np.clip((x0 - lo) / span, ARCTANH_CLAMP, 1.0 - ARCTANH_CLAMP) - 1.0)
    w = np.zeros_like(x0)
    m1 = np.zeros_like(x0)
    m2 = np.zeros_like(x0)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    best: list[tuple[float, np.ndarray, int] | None] = [None] * n
    first: list[int | None] = [None] * n
    failed: dict[int, AttackResult] = {}
    for k in range(n):
        if not _feasible(batch, k):
            failed[k] = chk.result(k, chk.candidate(k, x0[k]), False, 0, "infeasible target")
    active = [k for k in range(n) if k not in failed]

    for s in range(cfg.steps + 1):
        if not active:
            break
        idx = np.array(active)
        th = np.tanh(np.where(mask[idx], w[idx], 0.0) + base[idx])
        xa = np.where(mask[idx], lo[idx] + span[idx] * (th + 1.0) / 2.0, x0[idx])
        last = s == cfg.steps
        if last:
            logits = model.forward_batch(xa, batch.widths_of(idx))
        else:
            _, grad, logits = model.loss_and_input_grad(xa, [batch.labels[k] for k in idx], batch.widths_of(idx))
        if s % cfg.check_every == 0 or last:
            for j, k in enumerate(idx):
                if not batch.reads(model, k, logits[j]):
                    continue
                cand = chk.candidate(k, xa[j])
                if not chk.verify(k, cand):
                    continue
                d2 = float(((cand - chk.b.strip(k, x0[k])) ** 2).sum())
                if first[k] is None:
                    first[k] = s
                if best[k] is None or d2 < best[k][0]:
                    best[k] = (d2, cand, s)
        if last:
            break
        t = s + 1
        for j, k in enumerate(idx):
            if cfg.early_stop and best[k] is not None:
                continue
            dx = cs[k] * grad[j] + 2.0 * (xa[j] - x0[k])
            dw = np.where(mask[k], dx * span[k] * (1.0 - th[j] ** 2) / 2.0, 0.0)
            m1[k] = b1 * m1[k] + (1 - b1) * dw
            m2[k] = b2 * m2[k] + (1 - b2) * dw * dw
            mhat = m1[k] / (1 - b1**t)
            vhat = m2[k] / (1 - b2**t)
            w[k] = w[k] - cfg.lr * mhat / (np.sqrt(vhat) + adam_eps)
        if cfg.early_stop:
            active = [k for k in active if best[k] is None]

    results = []
    for k in range(n):
        if k in failed:
            res = failed[k]
        elif best[k] is not None:
            res = chk.result(k, best[k][1], True, first[k])
        else:
            th = np.tanh(np.where(mask[k], w[k], 0.0) + base[k])
            xa = np.where(mask[k], lo[k] + span[k] * (th + 1.0) / 2.0, x0[k])
            res = chk.result(k, chk.candidate(k, xa), False, cfg.steps, "step budget exhausted")
        res.c = float(cs[k])
        results.append(res)
    return results


def _binary_search_engine(
    batch: _Batch, model: CTCRecognizer, cfg: OptAttackConfig, quantize: bool
) -> list[AttackResult]:
    n = len(batch.widths)
    lo = np.full(n, math.log(cfg.c_range[0]))
    hi = np.full(n, math.log(cfg.c_range[1]))
    cs = np.full(n, float(cfg.c))
    best: list[AttackResult | None] = [None] * n
    last: list[AttackResult | None] = [None] * n
    history: list[list] = [[] for _ in range(n)]
    for _ in range(cfg.binary_search_steps):
        runs = _opt_engine(batch, model, cfg, cs, quantize)
        for k, r in enumerate(runs):
            history[k].append({"c": float(cs[k]), "success": r.success, "mse": r.metrics.mse})
            last[k] = r
            if r.success:
                hi[k] = math.log(cs[k])
                if best[k] is None or r.metrics.mse < best[k].metrics.mse:
                    best[k] = r
            else:
                lo[k] = math.log(cs[k])
            cs[k] = math.exp((lo[k] + hi[k]) / 2.0)
    out = []
    for k in range(n):
        r = best[k] if best[k] is not None else last[k]
        r.c_history = history[k]
        out.append(r)
    return out


# --------------------------------------------------------------------------
# public entry points


def _single(x0, mask, target: str, model: CTCRecognizer) -> list:
    x0 = check_image(x0, height=model.height)
    labels = model.encode(target)
    need = required_frames(labels)
    if need > n_frames(x0.shape[1]):
        raise InfeasibleTargetError(f"target {target!r} needs {need} frames, image gives {n_frames(x0.shape[1])}")
    return [(x0, mask, target)]


def grad_attack(
    x0, mask, target: str, model: CTCRecognizer, cfg: GradAttackConfig | None = None, *, quantize: bool = False
) -> AttackResult:
    """Momentum iterative attack confined to ``mask``.

    With ``quantize`` every accepted iterate is rounded to 8-bit levels
    inside the eps box and success is checked on the rounded image.
    """
    cfg = cfg or GradAttackConfig()
    return _grad_engine(_make_batch(_single(x0, mask, target, model), model), model, cfg, quantize)[0]


def opt_attack(
    x0, mask, target: str, model: CTCRecognizer, cfg: OptAttackConfig | None = None, *, quantize: bool = False
) -> AttackResult:
    cfg = cfg or OptAttackConfig()
    batch = _make_batch(_single(x0, mask, target, model), model)
    return _opt_engine(batch, model, cfg, np.array([cfg.c]), quantize)[0]


def binary_search_c(
    x0, mask, target: str, model: CTCRecognizer, cfg: OptAttackConfig | None = None, *, quantize: bool = False
) -> tuple[float | None, AttackResult]:
    """Log-scale bisection over the tradeoff constant.

    Returns the constant of the lowest-MSE success (``None`` if every probe
    failed) and that result; ``c_history`` lists every probe.
    """
    cfg = cfg or OptAttackConfig()
    batch = _make_batch(_single(x0, mask, target, model), model)
    r = _binary_search_engine(batch, model, cfg, quantize)[0]
    return (r.c if r.success else None), r


def batch_attack(
    items: Sequence[tuple],
    model: CTCRecognizer,
    cfg: GradAttackConfig | OptAttackConfig | None = None,
    *,
    search_c: bool = False,
    quantize: bool = False,
    color_masks: Sequence | None = None,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> list[AttackResult]:
    """Attack ``(image, mask, target)`` items in padded batches.

    Items are cut into consecutive chunks of ``chunk_size``; each chunk is
    padded to its widest image and runs until all of its items finish.
    ``color_masks`` (one mask or ``None`` per item) adds a success check on
    the colour round trip of the candidate.
    """
    if not items:
        raise ValueError("batch_attack needs at least one item")
    cfg = cfg or GradAttackConfig()
    views = list(color_masks) if color_masks is not None else [None] * len(items)
    if len(views) != len(items):
        raise ValueError("color_masks must have one entry per item")
    chunks = [range(s, min(s + chunk_size, len(items))) for s in range(0, len(items), chunk_size)]

    def run(chunk):
        batch = _make_batch([items[k] for k in chunk], model, [views[k] for k in chunk])
        if isinstance(cfg, GradAttackConfig):
            return _grad_engine(batch, model, cfg, quantize)
        if search_c:
            return _binary_search_engine(batch, model, cfg, quantize)
        return _opt_engine(batch, model, cfg, np.full(len(chunk), float(cfg.c)), quantize)

    if workers <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return [r for part in parts for r in part]


# --------------------------------------------------------------------------
# watermark pipeline


@dataclass
class WatermarkPlan:
    anchor: Rect | None
    wm_mask: np.ndarray
    txt_mask: np.ndarray
    x0: np.ndarray

    @property
    def color_mask(self) -> np.ndarray:
        """Watermark pixels on the background; these take the colour."""
        return self.wm_mask & self.txt_mask


def line_span(anchor: Rect, x, tau: float = 0.5) -> Rect:
    """Stretch ``anchor`` vertically over the rows that hold ink."""
    rows = np.flatnonzero((np.asarray(x) <= tau).any(axis=1))
    if rows.size == 0:
        return anchor
    return Rect(min(anchor.top, int(rows[0])), anchor.left, max(anchor.bottom, int(rows[-1]) + 1), anchor.right)


def plan_watermark(
    x, anchor: Rect, spec: WatermarkSpec | None = None, tau: float = 0.5, full_height: bool = True
) -> WatermarkPlan:
    """Watermark mask, text mask and watermarked image for one found position.

    With ``full_height`` the watermark is placed to cover the anchor's
    columns over the whole text line, since a letter spans the line.
    """
    x = np.asarray(x, dtype=np.float64)
    target = line_span(anchor, x, tau) if full_height else anchor
    spec = replace(spec or WatermarkSpec(), anchor=target)
    wm = render_watermark_mask(spec, x.shape)
    tm = text_mask(x, tau)
    return WatermarkPlan(anchor, wm, tm, apply_watermark(x, wm, tm, spec.beta))


def probe_positions(
    images: Sequence[np.ndarray],
    targets: Sequence[str],
    model: CTCRecognizer,
    probe_cfg: GradAttackConfig,
    workers: int = 1,
) -> list[Rect | None]:
    """Run capped basic attacks and locate the main perturbed region of each."""
    items = [(x, np.ones(np.shape(x), dtype=bool), t) for x, t in zip(images, targets)]
    probes = batch_attack(items, model, probe_cfg, workers=workers)
    rects: list[Rect | None] = []
    for x, p in zip(images, probes):
        rects.append(locate(x, p.adversarial))
    return rects


def locate(x, probe_adv) -> Rect | None:
    """``find_position`` with lower cuts when a short probe leaves only faint traces."""
    peak = float(np.abs(np.asarray(x) - np.asarray(probe_adv)).max())
    for cut in (None, 0.1 * peak, 0.02 * peak):
        try:
            return find_position(x, probe_adv, cut)
        except NoPerturbedRegionError:
            continue
    # scattered changes that no opening survives: take the raw largest blob
    comps = components(perturbed_region(x, probe_adv, 0.25 * peak)) if peak > 0 else []
    return comps[0][1] if comps else None


def watermark_attack_batch(
    images: Sequence[np.ndarray],
    targets: Sequence[str],
    model: CTCRecognizer,
    cfg: GradAttackConfig | OptAttackConfig | None = None,
    *,
    spec: WatermarkSpec | None = None,
    probe_iter: int = 300,
    tau: float = 0.5,
    search_c: bool = False,
    quantize: bool = False,
    color_check: bool = False,
    workers: int = 1,
) -> tuple[list[AttackResult], list[WatermarkPlan | None]]:
    """Probe, place a watermark over the main perturbed region, then attack inside it.

    The probe is a basic L2 gradient attack capped at ``probe_iter``
    iterations. Items whose probe leaves no perturbed region get a failed
    result and a ``None`` plan.
    """
    cfg = cfg or GradAttackConfig()
    spec = spec or WatermarkSpec()
    probe_cfg = replace(cfg, max_iter=probe_iter) if isinstance(cfg, GradAttackConfig) else GradAttackConfig(max_iter=probe_iter)
    rects = probe_positions(images, targets, model, probe_cfg, workers)
    plans: list[WatermarkPlan | None] = []
    items, where = [], []
    for k, (x, t, rect) in enumerate(zip(images, targets, rects)):
        if rect is None:
            plans.append(None)
            continue
        plan = plan_watermark(x, rect, spec, tau)
        plans.append(plan)
        items.append((plan.x0, plan.wm_mask, t))
        where.append(k)
    color = [plans[k].color_mask for k in where] if color_check else None
    done = batch_attack(items, model, cfg, search_c=search_c, quantize=quantize, color_masks=color, workers=workers) if items else []
    results: list[AttackResult | None] = [None] * len(images)
    for k, r in zip(where, done):
        results[k] = r
    for k, x in enumerate(images):
        if results[k] is None:
            x = check_image(x)
            results[k] = AttackResult(x.copy(), False, 0, model.predict([x])[0], targets[k], image_metrics(x, x), "no perturbed region")
    return results, plans


def protect(
    x,
    wm_mask,
    txt_mask,
    beta: float,
    model: CTCRecognizer,
    cfg: GradAttackConfig | None = None,
    *,
    ground_truth: str | None = None,
    quantize: bool = False,
) -> AttackResult:
    """Attack a plainly watermarked image toward its own correct reading."""
    x = check_image(x, height=model.height)
    clean = model.predict([x])[0]
    truth = clean if ground_truth is None else ground_truth
    if clean != truth:
        raise ValueError(f"clean image reads {clean!r}, not the ground truth {truth!r}")
    x0 = apply_watermark(x, wm_mask, txt_mask, beta)
    return grad_attack(x0, wm_mask, truth, model, cfg, quantize=quantize)


def protect_batch(
    images: Sequence[np.ndarray],
    plans: Sequence[WatermarkPlan],
    truths: Sequence[str],
    model: CTCRecognizer,
    cfg: GradAttackConfig | None = None,
    *,
    quantize: bool = False,
    workers: int = 1,
) -> list[AttackResult]:
    clean = model.predict(list(images))
    bad = [k for k, (p, t) in enumerate(zip(clean, truths)) if p != t]
    if bad:
        raise ValueError(f"{len(bad)} clean images are misread (first: item {bad[0]}); protection needs correct readings")
    items = [(p.x0, p.wm_mask, t) for p, t in zip(plans, truths)]
    return batch_attack(items, model, cfg or GradAttackConfig(), quantize=quantize, workers=workers)

