"""Seeded synthetic multispectral scene generator.

Stands in for a real aligned color/thermal pedestrian dataset at desk
scale. Pedestrians are tall (2:1) soft-edged rectangles. By day they are
visible in both modalities (dark silhouettes in color, hot blobs in
thermal); by night the color channel carries only a dark background plus
noise (pedestrian contrast zero) while the thermal channel is unchanged,
so color is informative only in daylight and thermal always. Day and night brightness bands are disjoint, which makes
the day/night classification task separable by construction.

Every frame is generated from an rng derived from (seed, frame index),
so regeneration is bit-identical.
"""

import os
from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .evaluation import GtEntry
from .imaging import Image, ImagePair, write_image

EDGE_BAND = 0.08  # fraction of the half-extent over which blob edges fade


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    pedestrians_mean: float = 1.2  # Poisson mean per frame
    height_range: tuple = (48.0, 62.0)
    night_fraction: float = 0.5
    color_noise: float = 6.0
    night_color_noise: float = 20.0  # high-gain sensor noise after dark
    thermal_noise: float = 5.0
    day_background: tuple = (140.0, 200.0)  # color base brightness band by day
    night_background: tuple = (10.0, 40.0)
    day_contrast: float = 60.0  # pedestrian/background margin in color, daytime
    thermal_background: tuple = (20.0, 60.0)
    thermal_pedestrian: tuple = (180.0, 230.0)
    ignore_probability: float = 0.15  # chance of a "people" cluster region
    occlusion_probability: float = 0.15
    seed: int = 7

    def __post_init__(self):
        for p in (self.night_fraction, self.ignore_probability, self.occlusion_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must lie in [0, 1], got {p}")
        if self.height_range[1] > self.image_size:
            raise ValueError("pedestrian heights must fit inside the image")


def _blob_weight(h, w, x, y, bw, bh):
    """Soft-edged rectangle weight map for a box at (x, y, bw, bh):
    1 inside, fading linearly to 0 over the outer EDGE_BAND of each
    half-extent. The weight > 0.5 footprint covers ~96% of the box per
    axis, keeping annotation/footprint IoU above 0.9."""
    ys = (np.arange(h) + 0.5 - (y + bh / 2)) / (bh / 2)
    xs = (np.arange(w) + 0.5 - (x + bw / 2)) / (bw / 2)
    m = np.maximum(np.abs(ys)[:, None], np.abs(xs)[None, :])
    return np.clip((1.0 - m) / EDGE_BAND, 0.0, 1.0)


def _paint(channel, weight, value):
    channel += weight * (value - channel)


def generate_pair(cfg: SceneConfig, rng, condition=None):
    """One frame: (ImagePair, [GtEntry], condition). If condition is None
    it is drawn from the configured night fraction."""
    if condition is None:
        condition = "night" if rng.random() < cfg.night_fraction else "day"
    size = cfg.image_size
    night = condition == "night"
    bg_lo, bg_hi = cfg.night_background if night else cfg.day_background
    color = np.empty((size, size, 3))
    channel_bg = [rng.uniform(bg_lo, bg_hi) for _ in range(3)]
    for ch in range(3):
        color[:, :, ch] = channel_bg[ch]
    thermal = np.full((size, size), rng.uniform(*cfg.thermal_background))

    entries = []
    n_peds = int(rng.poisson(cfg.pedestrians_mean))
    for _ in range(n_peds):
        h = rng.uniform(*cfg.height_range)
        w = h / 2.0
        x = rng.uniform(0.0, size - w)
        y = rng.uniform(0.0, size - h)
        weight = _blob_weight(size, size, x, y, w, h)
        if not night:
            # consistently darker than the actual per-channel background by
            # the configured margin: a silhouette-like appearance cue the
            # color stream can learn, with contrast that never collapses at
            # the edges of the background band
            for ch in range(3):
                base = channel_bg[ch] - cfg.day_contrast
                _paint(color[:, :, ch], weight, np.clip(base + rng.normal(0, 5), 0, 255))
        _paint(thermal, weight, rng.uniform(*cfg.thermal_pedestrian))
        occlusion = "partial" if rng.random() < cfg.occlusion_probability else "none"
        entries.append(GtEntry(bbox=BBox(x, y, w, h), label="person", occlusion=occlusion))

    if rng.random() < cfg.ignore_probability:
        # crowd region annotated as "people": a cluster of small blobs
        rw, rh = rng.uniform(18, 26), rng.uniform(24, 34)
        rx = rng.uniform(0.0, size - rw)
        ry = rng.uniform(0.0, size - rh)
        for _ in range(3):
            bh = rng.uniform(10, 16)
            bw = bh / 2
            bx = rng.uniform(rx, rx + rw - bw)
            by = rng.uniform(ry, ry + rh - bh)
            weight = _blob_weight(size, size, bx, by, bw, bh)
            if not night:
                for ch in range(3):
                    _paint(color[:, :, ch], weight,
                           np.clip(channel_bg[ch] - cfg.day_contrast, 0, 255))
            _paint(thermal, weight, rng.uniform(*cfg.thermal_pedestrian))
        entries.append(GtEntry(bbox=BBox(rx, ry, rw, rh), label="people"))

    color += rng.normal(0.0, cfg.night_color_noise if night else cfg.color_noise,
                        size=color.shape)
    thermal += rng.normal(0.0, cfg.thermal_noise, size=thermal.shape)
    pair = ImagePair(
        color=Image(np.clip(color, 0, 255).round().astype(np.uint8)),
        thermal=Image(np.clip(thermal, 0, 255).round().astype(np.uint8)[:, :, None]),
        condition=condition,
    )
    return pair, entries, condition


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    split: str
    condition: str


def generate_dataset(cfg: SceneConfig, n_train, n_test, out_dir):
    """Write image pairs, annotations and manifest under out_dir.

    Layout: images/{split}/{frame}_color.ppm and _thermal.pgm,
    annotations/{split}/{frame}.txt, manifest.txt. Returns the manifest
    entry list. Byte-identical for a fixed (config, seed).
    """
    from . import dataio  # local import; dataio depends on evaluation types only

    manifest = []
    index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        img_dir = os.path.join(out_dir, "images", split)
        ann_dir = os.path.join(out_dir, "annotations", split)
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(ann_dir, exist_ok=True)
        for k in range(count):
            frame_id = f"{split}_{k:05d}"
            rng = np.random.default_rng([cfg.seed, index])
            pair, entries, condition = generate_pair(cfg, rng)
            try:
                write_image(os.path.join(img_dir, f"{frame_id}_color.ppm"), pair.color)
                write_image(os.path.join(img_dir, f"{frame_id}_thermal.pgm"), pair.thermal)
                dataio.write_annotations(os.path.join(ann_dir, f"{frame_id}.txt"), entries)
            except OSError as exc:
                raise OSError(f"failed writing frame {frame_id} under {out_dir}: {exc}") from exc
            manifest.append(ManifestEntry(frame_id=frame_id, split=split, condition=condition))
            index += 1
    dataio.write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest
