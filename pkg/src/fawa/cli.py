"""Command-line front end: ``fawa render|train|attack|protect|colorize|eval``.

Settings come from dataclass defaults, then a ``--config`` file (INI style
``key = value`` lines under any section names), then ``FAWA_<KEY>``
environment variables, then command-line flags.

Exit statuses: 0 success, 2 invalid input or configuration, 3 training
did not converge, 4 at least one attack failed.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence, get_type_hints

import numpy as np

from . import fileio
from .attack import (
    AttackResult,
    GradAttackConfig,
    OptAttackConfig,
    batch_attack,
    line_span,
    plan_watermark,
    watermark_attack_batch,
)
from .metrics import image_metrics, summarize
from .model import CTCRecognizer, TrainingDidNotConverge
from .textgen import (
    LETTER_KINDS,
    VARIANTS,
    GlyphFont,
    NoValidTargetError,
    render_text,
    desk_words,
    gen_letter_target,
    gen_word_target,
    load_wordlist,
)
from .watermark import MAX_COLOR_GRAY, GamutError, Rect, WatermarkSpec, apply_watermark, colorize, to_gray

logger = logging.getLogger("fawa")

EXIT_OK, EXIT_INVALID, EXIT_NO_CONVERGENCE, EXIT_ATTACK_FAILED = 0, 2, 3, 4
MIXED_KINDS = ("replace-easy", "replace-random", "replace-hard")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    checkpoint: str = "desk.npz"
    corpus: str = "corpus/manifest.tsv"
    wordlist: str = ""
    n_words: int = 200
    fonts: str = "thin,bold"
    out: str = "out"
    run: str = ""
    workers: int = 0
    limit: int = 0
    png: bool = False
    # training
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 16
    tone_jitter: float = 0.3
    # attack
    method: str = "grad"
    scope: str = "wm"
    target_kind: str = "mixed"
    eps: float = 0.2
    alpha: float = 0.0
    mu: float = 1.0
    max_iter: int = 2000
    norm: str = "l2"
    check_every: int = 10
    c: float = 10.0
    steps: int = 1000
    lr: float = 0.01
    binary_search_steps: int = 5
    search_c: bool = False
    early_stop: bool = False
    color_check: bool = True
    # watermark
    wm_text: str = "ecml"
    rotation: float = 15.0
    glyph_height: int = 0
    stroke: int = 3
    beta: float = 0.682
    probe_iter: int = 300
    tau: float = 0.5
    color: bool = False

    def grad_config(self) -> GradAttackConfig:
        return GradAttackConfig(
            eps=self.eps, alpha=self.alpha or None, mu=self.mu, max_iter=self.max_iter,
            norm=self.norm, check_every=self.check_every,
        )

    def opt_config(self) -> OptAttackConfig:
        return OptAttackConfig(
            c=self.c, steps=self.steps, lr=self.lr, binary_search_steps=self.binary_search_steps,
            check_every=self.check_every, early_stop=self.early_stop,
        )

    def attack_config(self):
        return self.grad_config() if self.method == "grad" else self.opt_config()

    def watermark_spec(self) -> WatermarkSpec:
        return WatermarkSpec(
            text=self.wm_text, rotation=self.rotation, glyph_height=self.glyph_height or None,
            beta=self.beta, stroke=self.stroke,
        )

    def font_list(self) -> list[GlyphFont]:
        names = [f.strip() for f in self.fonts.split(",") if f.strip()]
        return [GlyphFont(n) for n in names]

    def n_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def validate(self) -> "RunConfig":
        try:
            self.grad_config()
            self.opt_config()
            self.watermark_spec()
            self.font_list()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.method not in ("grad", "opt"):
            raise ConfigError(f"method must be grad or opt, got {self.method!r}")
        if self.scope not in ("basic", "wm"):
            raise ConfigError(f"scope must be basic or wm, got {self.scope!r}")
        if self.target_kind not in LETTER_KINDS + ("word", "mixed"):
            raise ConfigError(f"unknown target kind {self.target_kind!r}")
        if self.beta + self.eps > MAX_COLOR_GRAY + 1e-12:
            raise ConfigError(
                f"beta + eps = {self.beta + self.eps:.4f} exceeds {MAX_COLOR_GRAY:.3f}; "
                "perturbed watermark pixels could not be colorized"
            )
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.limit < 0 or self.n_words < 1 or self.epochs < 1 or self.batch_size < 1 or self.probe_iter < 1:
            raise ConfigError("limit must be >= 0; n_words, epochs, batch_size, probe_iter >= 1")
        return self


def _convert(name: str, kind, raw):
    if isinstance(raw, str):
        text = raw.strip()
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def build_config(config_file: str | None, overrides: dict, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    hints = get_type_hints(RunConfig)
    values: dict = {}
    if config_file:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(config_file, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                key = key.replace("-", "_")
                if key not in hints:
                    raise ConfigError(f"{config_file}: unknown key {key!r} in [{section}]")
                values[key] = _convert(key, hints[key], raw)
    for key, kind in hints.items():
        env = environ.get(f"FAWA_{key.upper()}")
        if env is not None:
            values[key] = _convert(key, kind, env)
    for key, val in overrides.items():
        if val is not None:
            values[key] = _convert(key, hints[key], val)
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# helpers


def _font_of(name: str) -> str:
    stem = Path(name).stem
    tail = stem.rsplit("_", 1)[-1]
    return tail if tail in VARIANTS else ""


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return p


def _load_items(cfg: RunConfig):
    items = fileio.load_corpus(_require(cfg.corpus, "corpus manifest"))
    if not items:
        raise ConfigError(f"corpus {cfg.corpus} is empty")
    return items[: cfg.limit] if cfg.limit else items


def _dictionary(cfg: RunConfig) -> list[str]:
    return load_wordlist(_require(cfg.wordlist, "wordlist") if cfg.wordlist else None)


def _target(cfg: RunConfig, k: int, label: str, image, model, dictionary):
    kind = MIXED_KINDS[k % len(MIXED_KINDS)] if cfg.target_kind == "mixed" else cfg.target_kind
    if kind == "word":
        return kind, gen_word_target(label, dictionary, seed=cfg.seed + k).target
    return kind, gen_letter_target(label, model, kind, dictionary, seed=cfg.seed + k, image=image).target


def ink_runs(x, tau: float = 0.5) -> list[tuple[int, int]]:
    """Column spans of ink separated by blank columns (one per glyph for rendered text)."""
    cols = (np.asarray(x) <= tau).any(axis=0).astype(np.int8)
    edges = np.diff(np.concatenate([[0], cols, [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def protect_anchor(x, seed: int, tau: float = 0.5) -> Rect:
    """A seeded glyph of the line, over the full text height; image centre if no ink."""
    h, w = np.shape(x)
    runs = ink_runs(x, tau)
    if not runs:
        return Rect(0, w // 4, h, max(w // 4 + 1, 3 * w // 4))
    a, b = runs[int(np.random.default_rng(seed).integers(len(runs)))]
    return line_span(Rect(h // 2, a, h // 2 + 1, b), x, tau)


def _write_run(cfg: RunConfig, kind: str, entries, results: Sequence[AttackResult], plans) -> int:
    out = Path(cfg.out)
    rows, manifest, meta = [], [], []
    for (name, label, k_kind, target), res, plan in zip(entries, results, plans):
        stem = Path(name).stem
        adv_name = f"adv/{stem}.pgm"
        fileio.write_pgm(out / adv_name, res.adversarial)
        if cfg.png:
            fileio.write_png(out / f"png/{stem}.png", res.adversarial)
        if plan is not None:
            fileio.write_pbm(out / f"masks/{stem}.wm.pbm", plan.wm_mask)
            fileio.write_pbm(out / f"masks/{stem}.text.pbm", plan.txt_mask)
        manifest.append((adv_name, target))
        meta.append({"id": stem, "source": name, "label": label, "masked": plan is not None})
        rows.append({
            "id": stem, "kind": k_kind, "font": _font_of(name),
            "norm": cfg.norm if cfg.method == "grad" else "l2",
            "success": bool(res.success), "iterations": int(res.iterations_used),
            "mse": res.metrics.mse, "psnr": res.metrics.psnr, "ssim": res.metrics.ssim,
            "target": target, "predicted": res.predicted,
        })
    fileio.write_manifest(out / "adversarial.tsv", manifest)
    fileio.write_report(out / "report", rows)
    run = {
        "command": kind, "corpus": str(Path(cfg.corpus).resolve()), "beta": cfg.beta,
        "scope": cfg.scope, "method": cfg.method, "items": meta,
    }
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    summary = summarize(rows)
    print(f"{kind}: {summary.successes}/{summary.total} succeeded (ASR {summary.asr:.4f}), "
          f"I_avg {summary.i_avg:.1f}, mean MSE {summary.mean_mse:.6f}")
    return EXIT_OK if summary.successes == summary.total else EXIT_ATTACK_FAILED


# --------------------------------------------------------------------------
# commands


def cmd_render(cfg: RunConfig) -> int:
    fonts = cfg.font_list()
    if cfg.wordlist:
        words = load_wordlist(_require(cfg.wordlist, "wordlist"))
        words = words[: cfg.n_words]
    else:
        words = desk_words(cfg.n_words, seed=cfg.seed)
    if not words:
        raise ConfigError("wordlist is empty")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    # same seeded order as build_corpus, keeping the font of each sample
    flat = [(w, f) for w in dict.fromkeys(words) for f in fonts]
    order = np.random.default_rng(cfg.seed).permutation(len(flat))
    entries = []
    for k, i in enumerate(order):
        word, font = flat[i]
        name = f"images/{k:05d}_{word}_{font.variant}.pgm"
        fileio.write_pgm(out / name, render_text(word, font))
        entries.append((name, word))
    fileio.write_manifest(out / "manifest.tsv", entries)
    print(f"rendered {len(entries)} images to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    items = _load_items(cfg)
    model = CTCRecognizer(
        max_epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
        tone_jitter=cfg.tone_jitter, seed=cfg.seed, verbose=logger.isEnabledFor(logging.INFO),
    )
    try:
        model.fit([im for _, im, _ in items], [lab for _, _, lab in items])
    except TrainingDidNotConverge as exc:
        print(f"training did not converge: accuracy {exc.accuracy:.4f} after {exc.epochs} epochs", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.checkpoint)
    print(f"accuracy {model.train_accuracy_:.4f} after {model.n_epochs_} epochs; wrote {cfg.checkpoint}")
    return EXIT_OK


def _load_model(cfg: RunConfig) -> CTCRecognizer:
    path = _require(cfg.checkpoint, "checkpoint")
    try:
        return CTCRecognizer.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def _failed(x, target: str, model) -> AttackResult:
    return AttackResult(x.copy(), False, 0, model.predict([x])[0], target, image_metrics(x, x), "no valid target")


def cmd_attack(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    items = _load_items(cfg)
    dictionary = _dictionary(cfg)
    entries, todo = [], []
    for k, (name, x, label) in enumerate(items):
        try:
            kind, target = _target(cfg, k, label, x, model, dictionary)
            todo.append(k)
        except NoValidTargetError:
            kind, target = (MIXED_KINDS[k % 3] if cfg.target_kind == "mixed" else cfg.target_kind), ""
        entries.append((name, label, kind, target))
    images = [items[k][1] for k in todo]
    targets = [entries[k][3] for k in todo]
    attack_cfg = cfg.attack_config()
    results: list = [None] * len(items)
    plans: list = [None] * len(items)
    if images and cfg.scope == "wm":
        res, pl = watermark_attack_batch(
            images, targets, model, attack_cfg, spec=cfg.watermark_spec(), probe_iter=cfg.probe_iter,
            tau=cfg.tau, search_c=cfg.search_c, quantize=True, color_check=cfg.color_check,
            workers=cfg.n_workers(),
        )
    elif images:
        res = batch_attack(
            [(x, np.ones(x.shape, dtype=bool), t) for x, t in zip(images, targets)], model, attack_cfg,
            search_c=cfg.search_c, quantize=True, workers=cfg.n_workers(),
        )
        pl = [None] * len(res)
    else:
        res, pl = [], []
    for k, r, p in zip(todo, res, pl):
        results[k], plans[k] = r, p
    for k, (name, x, label) in enumerate(items):
        if results[k] is None:
            results[k] = _failed(x, "", model)
    return _write_run(cfg, "attack", entries, results, plans)


def cmd_protect(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    items = _load_items(cfg)
    spec = cfg.watermark_spec()
    clean = model.predict([x for _, x, _ in items])
    entries, plans, todo = [], [], []
    for k, (name, x, label) in enumerate(items):
        plan = plan_watermark(x, protect_anchor(x, cfg.seed + k, cfg.tau), spec, cfg.tau)
        plans.append(plan)
        entries.append((name, label, "protect", label))
        if clean[k] == label:
            todo.append(k)
    plain = model.predict([p.x0 for p in plans])
    done = batch_attack(
        [(plans[k].x0, plans[k].wm_mask, items[k][2]) for k in todo], model, cfg.grad_config(),
        quantize=True, workers=cfg.n_workers(),
    ) if todo else []
    results: list = [None] * len(items)
    for k, r in zip(todo, done):
        results[k] = r
    for k, (name, x, label) in enumerate(items):
        if results[k] is None:
            p = plans[k]
            results[k] = AttackResult(p.x0, False, 0, plain[k], label, image_metrics(p.x0, p.x0), "clean image misread")
    by_font: dict[str, list] = {}
    for k, (name, _, label) in enumerate(items):
        by_font.setdefault(_font_of(name), []).append((plain[k] == label, results[k].success))
    summary = {
        f or "unknown": {"plain_accuracy": float(np.mean([a for a, _ in v])), "protected_accuracy": float(np.mean([b for _, b in v]))}
        for f, v in sorted(by_font.items())
    }
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "protect_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for f, s in summary.items():
        print(f"{f}: plain watermark accuracy {s['plain_accuracy']:.4f}, protected {s['protected_accuracy']:.4f}")
    return _write_run(cfg, "protect", entries, results, plans)


def _run_dir(cfg: RunConfig) -> Path:
    run = Path(cfg.run or cfg.out)
    if not (run / "run.json").exists():
        raise ConfigError(f"{run} is not an attack or protect output directory (run.json missing)")
    return run


def _masks(run: Path, stem: str):
    wm, tm = run / f"masks/{stem}.wm.pbm", run / f"masks/{stem}.text.pbm"
    if wm.exists() and tm.exists():
        return fileio.read_pbm(wm), fileio.read_pbm(tm)
    return None


def cmd_colorize(cfg: RunConfig) -> int:
    run = _run_dir(cfg)
    meta = json.loads((run / "run.json").read_text(encoding="utf-8"))
    for item, (adv_name, _) in zip(meta["items"], fileio.read_manifest(run / "adversarial.tsv")):
        x = fileio.read_pgm(run / adv_name)
        masks = _masks(run, item["id"])
        region = masks[0] & masks[1] if masks else np.zeros(x.shape, dtype=bool)
        try:
            rgb = colorize(x, region)
        except GamutError as exc:
            raise ConfigError(f"{adv_name}: {exc}") from None
        fileio.write_ppm(run / f"color/{item['id']}.ppm", rgb)
        if cfg.png:
            fileio.write_png(run / f"color/{item['id']}.png", rgb)
    print(f"colorized {len(meta['items'])} images in {run / 'color'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Recompute success and image metrics from the written files."""
    run = _run_dir(cfg)
    model = _load_model(cfg)
    meta = json.loads((run / "run.json").read_text(encoding="utf-8"))
    source_root = Path(meta["corpus"]).parent
    reported = {r["id"]: r for r in fileio.read_report(run / "report.jsonl")}
    rows, images, originals = [], [], []
    entries = fileio.read_manifest(run / "adversarial.tsv")
    for item, (adv_name, target) in zip(meta["items"], entries):
        if cfg.color:
            img = to_gray(fileio.read_ppm(run / f"color/{item['id']}.ppm"))
        else:
            img = fileio.read_pgm(run / adv_name)
        x = fileio.read_pgm(source_root / item["source"])
        masks = _masks(run, item["id"])
        x0 = apply_watermark(x, masks[0], masks[1], meta["beta"]) if masks else x
        images.append(img)
        originals.append(x0)
    preds = model.predict(images)
    for item, (adv_name, target), img, x0, pred in zip(meta["items"], entries, images, originals, preds):
        m = image_metrics(x0, img)
        old = reported.get(item["id"], {})
        rows.append({
            "id": item["id"], "kind": old.get("kind", ""), "font": old.get("font", ""), "norm": old.get("norm", ""),
            "success": bool(target) and pred == target, "iterations": int(old.get("iterations", 0)),
            "mse": m.mse, "psnr": m.psnr, "ssim": m.ssim, "target": target, "predicted": pred,
        })
    fileio.write_report(run / ("eval_color" if cfg.color else "eval"), rows)
    s = summarize(rows)
    print(json.dumps({"asr": s.asr, "successes": s.successes, "total": s.total, "i_avg": s.i_avg,
                      "mean_mse": s.mean_mse, "mean_psnr": s.mean_psnr, "mean_ssim": s.mean_ssim}, sort_keys=True))
    return EXIT_OK if s.successes == s.total else EXIT_ATTACK_FAILED


COMMANDS = {
    "render": cmd_render, "train": cmd_train, "attack": cmd_attack,
    "protect": cmd_protect, "colorize": cmd_colorize, "eval": cmd_eval,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fawa", description="Watermark-disguised adversarial text images.")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    hints = get_type_hints(RunConfig)
    for name in COMMANDS:
        sp = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", dest="sub_config", help="key = value settings file")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if hints[f.name] is bool:
                sp.add_argument(flag, dest=f.name, nargs="?", const="true", metavar="BOOL")
            else:
                sp.add_argument(flag, dest=f.name, metavar=f.name.upper())
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    config_file = args.pop("sub_config", None) or args.pop("config", None)
    args.pop("config", None)
    verbose = args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(config_file, args)
        return COMMANDS[command](cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
