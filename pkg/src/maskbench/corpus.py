"""Labeled image corpora: JSONL manifests, seeded subsampling, bilinear resize.

A corpus is described by a manifest file (one JSON object per line with
image_id / path / label).  Derived manifests -- subsampled or resized sets --
carry a header line recording how they were produced so runs stay
reproducible.  Images are plain HxWx3 uint8 numpy arrays everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DuplicateIdError, FormatError, RangeError

# numpy's Philox is counter-based; the name is recorded in derived-manifest
# headers so a reader knows which generator reproduces the sample.
SUBSAMPLE_PRNG = "philox4x64"

_MANIFEST_FIELDS = ("image_id", "path", "label")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: str


@dataclass
class CorpusManifest:
    """Ordered list of corpus entries plus an optional provenance header."""

    entries: list[ManifestEntry]
    header: dict | None = None
    source: str | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def labels(self) -> dict[str, str]:
        """image_id -> label map (the truth table used by evaluation)."""
        return {e.image_id: e.label for e in self.entries}

    def resolve_path(self, entry: ManifestEntry) -> Path:
        """Entry paths are relative to the manifest file when not absolute."""
        p = Path(entry.path)
        if not p.is_absolute() and self.source is not None:
            return Path(self.source).parent / p
        return p

    def validate(self) -> None:
        """Eagerly decode every image; raises on the first unreadable one."""
        for entry in self.entries:
            load_image(self.resolve_path(entry))


def load_manifest(path: str | Path) -> CorpusManifest:
    """Read a JSONL manifest.

    The first line may be a header object ``{"header": true, ...}``; every
    other line must contain the image_id/path/label fields.  Duplicate
    image_id values are an error.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    header: dict | None = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno}: expected a JSON object")
            if lineno == 1 and obj.get("header") is True:
                header = obj
                continue
            missing = [k for k in _MANIFEST_FIELDS if k not in obj]
            if missing:
                raise FormatError(f"{path}: line {lineno}: missing field(s) {missing}")
            image_id, img_path, label = (str(obj[k]) for k in _MANIFEST_FIELDS)
            if image_id in seen:
                raise DuplicateIdError(f"duplicate image_id {image_id!r} at line {lineno}")
            seen.add(image_id)
            entries.append(ManifestEntry(image_id, img_path, label))
    return CorpusManifest(entries, header=header, source=str(path))


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if manifest.header is not None:
            fh.write(json.dumps(manifest.header, sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(
                {"image_id": e.image_id, "path": e.path, "label": e.label}) + "\n")


def subsample(manifest: CorpusManifest, n: int, seed: int) -> CorpusManifest:
    """Pick n entries without replacement using a seeded Philox stream.

    Output is sorted by image_id so downstream processing order is stable.
    Same (manifest, n, seed) always yields the same subset.
    """
    if n > len(manifest):
        raise RangeError(f"cannot sample {n} entries from a corpus of {len(manifest)}")
    rng = np.random.Generator(np.random.Philox(seed))
    idx = rng.choice(len(manifest.entries), size=n, replace=False)
    chosen = sorted((manifest.entries[i] for i in idx), key=lambda e: e.image_id)
    header = {"header": True, "prng": SUBSAMPLE_PRNG, "seed": seed}
    if manifest.source is not None:
        header["parent"] = manifest.source
    return CorpusManifest(list(chosen), header=header, source=manifest.source)


# ---------------------------------------------------------------------------
# images


def as_rgb_array(image: np.ndarray) -> np.ndarray:
    """Check the universal image contract: HxWx3, uint8."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise RangeError(f"expected HxWx3 uint8 image, got shape {arr.shape} dtype {arr.dtype}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RangeError("image must be at least 1x1")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Decode PNG/JPEG to HxWx3 uint8; alpha dropped, grayscale replicated."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(image: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_rgb_array(image), mode="RGB").save(path, format="PNG")


def resize_to(image: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling and edge clamping.

    An identity resize returns a bit-exact copy.
    """
    src = as_rgb_array(image)
    if w < 1 or h < 1:
        raise RangeError(f"target size must be >= 1x1, got {w}x{h}")
    sh, sw = src.shape[:2]
    if (sw, sh) == (w, h):
        return src.copy()
    # Source sample positions of each output pixel center, clamped to the
    # valid coordinate range so edges extend rather than wrap.
    xs = np.clip((np.arange(w) + 0.5) * (sw / w) - 0.5, 0.0, sw - 1.0)
    ys = np.clip((np.arange(h) + 0.5) * (sh / h) - 0.5, 0.0, sh - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    pix = src.astype(np.float64)
    top = pix[y0][:, x0] * (1.0 - fx) + pix[y0][:, x1] * fx
    bot = pix[y1][:, x0] * (1.0 - fx) + pix[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.rint(out).astype(np.uint8)
