"""Image, mask, manifest and report files."""
from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

REPORT_FIELDS = (
    "id", "kind", "font", "norm", "success", "iterations",
    "mse", "mse_x1e4", "psnr", "ssim", "target", "predicted",
)


def _atomic_save(img: Image.Image, path, fmt: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format=fmt)
    os.replace(tmp, path)


def to_uint8(x) -> np.ndarray:
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    """8-bit binary PGM (P5, maxval 255) of a [0, 1] image."""
    _atomic_save(Image.fromarray(to_uint8(image), mode="L"), path, "PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected a grayscale PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pbm(path, mask) -> None:
    """Bit-packed PBM (P4); set mask pixels are stored as 1 (black)."""
    m = np.asarray(mask, dtype=bool)
    # Pillow's mode "1" stores white as nonzero, PBM stores black as 1
    _atomic_save(Image.fromarray(~m).convert("1"), path, "PPM")


def read_pbm(path) -> np.ndarray:
    with Image.open(path) as im:
        return ~np.asarray(im.convert("1"), dtype=bool)


def write_ppm(path, rgb) -> None:
    _atomic_save(Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB"), path, "PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, image) -> None:
    arr = np.asarray(image)
    img = Image.fromarray(arr.astype(np.uint8), mode="RGB") if arr.ndim == 3 else Image.fromarray(to_uint8(arr), mode="L")
    _atomic_save(img, path, "PNG")


def write_manifest(path, entries: Iterable[tuple[str, str]]) -> None:
    """One ``filename<TAB>label`` line per entry."""
    lines = []
    for name, label in entries:
        if "\t" in name or "\n" in name or "\t" in label or "\n" in label:
            raise ValueError(f"manifest entry {name!r}/{label!r} contains a tab or newline")
        lines.append(f"{name}\t{label}\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.count("\t") != 1:
                raise ValueError(f"{path}:{n}: expected 'filename<TAB>label'")
            out.append(tuple(line.split("\t")))
    return out


def load_corpus(manifest) -> list[tuple[str, np.ndarray, str]]:
    """``(filename, image, label)`` for every manifest line; paths are relative to the manifest."""
    root = Path(manifest).parent
    return [(name, read_pgm(root / name), label) for name, label in read_manifest(manifest)]


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_report(stem, rows: Sequence[dict]) -> tuple[Path, Path]:
    """Write ``stem.csv`` and ``stem.jsonl`` with one record per attack.

    ``mse`` is on the [0, 1] pixel scale; ``mse_x1e4`` is the same value
    times 10^4 for display. ``psnr`` is ``inf`` for untouched images (JSON
    stores it as the string ``"inf"``).
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".jsonl")
    full = []
    for r in rows:
        rec = {k: r.get(k, "") for k in REPORT_FIELDS}
        if rec["mse"] != "":
            rec["mse_x1e4"] = float(rec["mse"]) * 1e4
        full.append(rec)
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for rec in full:
            w.writerow([_fmt(rec[k]) for k in REPORT_FIELDS])
    os.replace(tmp, csv_path)
    tmp = json_path.with_name(json_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in full:
            clean = {k: (_fmt(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in rec.items()}
            fh.write(json.dumps(clean, sort_keys=False) + "\n")
    os.replace(tmp, json_path)
    return csv_path, json_path


def read_report(path) -> list[dict]:
    """Parse a ``.jsonl`` or ``.csv`` report back into typed rows."""
    path = Path(path)
    rows = []
    if path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            raw = [json.loads(line) for line in fh if line.strip()]
    else:
        with open(path, encoding="utf-8", newline="") as fh:
            raw = list(csv.DictReader(fh))
    for r in raw:
        row = dict(r)
        row["success"] = row["success"] in (True, "true")
        row["iterations"] = int(row["iterations"])
        for k in ("mse", "mse_x1e4", "psnr", "ssim"):
            row[k] = float(row[k])
        rows.append(row)
    return rows
