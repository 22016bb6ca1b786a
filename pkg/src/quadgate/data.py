"""Samples, synthetic severity data, P5 graymaps and score CSVs."""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

BACKGROUND = 0.1
FOREGROUND = 0.9


class Modality(enum.Enum):
    GE = "ge"
    LO = "lo"
    CIP = "cip"

    @property
    def range_max(self) -> float:
        return 100.0 if self is Modality.CIP else 8.0

    @property
    def step(self) -> float:
        return 1.0 if self is Modality.CIP else 0.5

    @property
    def levels(self) -> np.ndarray:
        """0, 0.5, ..., 8 (17 levels) for GE/LO; 0, 1, ..., 100 (101) for CIP."""
        k = int(round(self.range_max / self.step)) + 1
        return np.arange(k) * self.step

    def in_range(self, score: float) -> bool:
        return 0.0 <= score <= self.range_max

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DataError(f"unknown modality {value!r}; use ge, lo or cip") from None


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    score: float
    id: str


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]) if samples else np.zeros((0,)),
            np.array([s.score for s in samples], dtype=np.float64))


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    size: int = 100
    side: int = 64
    modality: Modality = Modality.CIP
    max_blobs: int = 3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)


def _draw_target_pixels(spec: SyntheticSpec, rng: np.random.Generator) -> int:
    """Blob pixel count, drawn from a deliberately skewed score distribution."""
    n = spec.side * spec.side
    m = spec.modality
    if m is Modality.CIP:
        # mostly healthy or mild, a thin tail of severe cases
        if rng.random() < 0.3:
            return 0
        return int(round(0.6 * rng.beta(1.2, 3.0) * n))
    k = len(m.levels)
    idx = np.arange(k)
    if m is Modality.GE:
        p = 1.0 + idx  # high scores dominate
    else:
        p = np.exp(-0.5 * ((idx - (k - 1) / 2) / 3.0) ** 2)  # mid-range dominates
    level = rng.choice(k, p=p / p.sum())
    return int(round(level * m.step / m.range_max * n))


def _paint_blobs(side: int, target: int, n_blobs: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly ``target`` pixels set, made of elliptical blobs.

    Each blob claims the free pixels with the smallest normalised elliptical
    radius around its centre, so the union has the requested size exactly.
    """
    mask = np.zeros((side, side), dtype=bool)
    if target == 0:
        return mask
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    shares = rng.dirichlet(np.ones(n_blobs)) * target
    quotas = np.floor(shares).astype(int)
    quotas[0] += target - quotas.sum()
    for quota in quotas:
        if quota <= 0:
            continue
        cy, cx = rng.uniform(0.2 * side, 0.8 * side, size=2)
        aspect = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        radius = (u / aspect) ** 2 + (v * aspect) ** 2
        radius[mask] = np.inf
        chosen = np.argsort(radius, axis=None, kind="stable")[:quota]
        mask.flat[chosen] = True
    return mask


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Dark images with bright blobs; score = blob pixel fraction * range max."""
    rng = np.random.default_rng(spec.seed)
    side = spec.side
    samples = []
    for i in range(spec.size):
        target = _draw_target_pixels(spec, rng)
        mask = _paint_blobs(side, target, int(rng.integers(1, spec.max_blobs + 1)), rng)
        img = np.where(mask, FOREGROUND, BACKGROUND)
        img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)[None]
        score = int(mask.sum()) / (side * side) * spec.modality.range_max
        samples.append(Sample(img, score, f"s{i:05d}"))
    return samples


def train_test_split(samples: list[Sample], n_test: int) -> tuple[list[Sample], list[Sample]]:
    cut = len(samples) - n_test
    return list(samples[:cut]), list(samples[cut:])


# ----------------------------------------------------------------------
# P5 graymaps
# ----------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated P5 header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Binary P5 graymap as floats in [0, 1], shape (H, W)."""
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed P5 header") from None
    if magic != b"P5":
        raise DataError(f"{path}: not a binary graymap (magic {magic!r})")
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = w * h * np.dtype(dtype).itemsize
    if len(buf) - pos < need:
        raise DataError(f"{path}: pixel data truncated")
    pix = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return pix.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (H, W) with half-pixel centres (align_corners=False).

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * H / out_h - 0.5``,
    clamped to the image; no antialiasing.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# ----------------------------------------------------------------------
# datasets on disk
# ----------------------------------------------------------------------

SCORE_FILE = "scores.csv"
IMAGE_SUFFIXES = (".pgm", ".pnm")


def write_dataset(samples: list[Sample], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(out / f"{s.id}.pgm", s.image)
    with open(out / SCORE_FILE, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "score"])
        for s in samples:
            wr.writerow([s.id, repr(float(s.score))])


def load_dataset(image_dir, score_file=None, modality=Modality.CIP,
                 size: tuple[int, int] | None = None) -> list[Sample]:
    """Read ``id,score`` rows and their P5 images, sorted by id.

    Images are scaled to [0, 1] and, when ``size`` is given, bilinearly resized.
    """
    modality = Modality.parse(modality)
    image_dir = Path(image_dir)
    score_file = Path(score_file) if score_file is not None else image_dir / SCORE_FILE
    if not score_file.is_file():
        raise DataError(f"score file {score_file} not found")
    rows = []
    with open(score_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["id", "score"]:
            raise DataError(f"{score_file}: expected header 'id,score'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                sid, score = row[0].strip(), float(row[1])
            except (IndexError, ValueError):
                raise DataError(f"{score_file}: row {lineno} is malformed: {row}") from None
            if not np.isfinite(score) or not modality.in_range(score):
                raise DataError(f"{score_file}: row {lineno} score {score} outside "
                                f"[0, {modality.range_max:g}] for modality {modality.value}")
            rows.append((sid, score))

    by_stem: dict[str, list[Path]] = {}
    for entry in os.scandir(image_dir):
        p = Path(entry.path)
        if p.suffix.lower() in IMAGE_SUFFIXES:
            by_stem.setdefault(p.stem, []).append(p)
    missing = [sid for sid, _ in rows if sid not in by_stem]
    if missing:
        raise DataError(f"no image found for ids: {', '.join(missing)}")
    ambiguous = [sid for sid, _ in rows if len(by_stem[sid]) > 1]
    if ambiguous:
        raise DataError(f"more than one image for ids: {', '.join(ambiguous)}")

    samples = []
    for sid, score in sorted(rows):
        img = read_pgm(by_stem[sid][0])
        if size is not None and img.shape != tuple(size):
            img = resize_bilinear(img, *size)
        samples.append(Sample(img[None], score, sid))
    return samples
