"""Materialize the augmented corpus and load manifest splits as arrays."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import MULTIPLIER, VARIANTS, AugmentSpec, augment_all, image_stream
from .dataset import Manifest, variant_name
from .exceptions import DataError
from .imaging import load_image, normalize, preprocess, save_image, to_uint8, worker_count
from .training import DataSplits

logger = logging.getLogger(__name__)


def augment_corpus(manifest: Manifest, out_dir, spec: AugmentSpec = AugmentSpec(),
                   size=(224, 224), channels: int = 3, denoise: bool = True) -> Manifest:
    """Preprocess every crop, write it plus its six variants under ``out_dir``.

    Returns the expanded manifest (rooted at ``out_dir``). Variants inherit
    the split of their source row. The output must hold exactly seven
    images per source crop.
    """
    out_dir = Path(out_dir)
    sources = [r for r in manifest.rows if not r.variant]
    if len(sources) != len(manifest.rows):
        raise DataError("manifest already contains augmented variants")

    def work(item):
        index, row = item
        base = preprocess(load_image(manifest.path_of(row), 3), size, channels, denoise)
        images = augment_all(base, spec, image_stream(spec, index))
        out = []
        for variant, img in zip(("",) + VARIANTS, images):
            rel = f"{row.writer_id}/{variant_name(row.char_label, row.repetition, variant)}"
            save_image(out_dir / rel, to_uint8(img))
            out.append(replace(row, image_path=rel))
        return out

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        groups = list(pool.map(work, enumerate(sources)))
    rows = [r for g in groups for r in g]
    if len(rows) != MULTIPLIER * len(sources):
        raise DataError(f"augmentation produced {len(rows)} images, expected {MULTIPLIER} x {len(sources)}")
    (out_dir / "augment_log.json").write_text(json.dumps({
        "spec": spec.to_dict(), "sources": len(sources), "images": len(rows),
        "size": list(size), "channels": channels,
    }, indent=2, sort_keys=True) + "\n")
    logger.info("augmented %d crops into %d images", len(sources), len(rows))
    return Manifest(rows, manifest.writers, out_dir)


def load_split(manifest: Manifest, split: str, channels: int = 3, size=None):
    """Stack one split into ``(X, y)``; images are resized only if ``size`` is given."""
    rows = manifest.subset(split)
    if not rows:
        return np.empty((0, channels) + tuple(size or (1, 1))), np.empty(0, dtype=np.int64)

    def read(row):
        img = load_image(manifest.path_of(row), channels)
        if size is not None and img.shape[:2] != tuple(size):
            return preprocess(img, size, channels, denoise=False)
        return normalize(img)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(read, rows))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"split {split!r} mixes image shapes {sorted(shapes)}; pass size=")
    return np.stack(images), manifest.labels(rows)


def load_splits(manifest: Manifest, channels: int = 3, size=None) -> DataSplits:
    if not manifest.subset("train"):
        raise DataError("manifest has no train rows; run the split step first")
    parts = [load_split(manifest, s, channels, size) for s in ("train", "val", "test")]
    return DataSplits(*parts[0], *parts[1], *parts[2])
