"""8-bit image containers, bilinear resize, pixel statistics, and binary
PGM/PPM readers and writers.

Images are uint8 arrays of shape (H, W, C) with C in {1, 3}; pairs hold an
aligned 3-channel color frame and a 1-channel thermal frame.
"""

from dataclasses import dataclass

import numpy as np

CONDITIONS = ("day", "night", "unknown")


@dataclass
class Image:
    data: np.ndarray  # uint8, (H, W, C)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"Image must be (H, W, 1|3), got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ValueError(f"Image data must be uint8, got {self.data.dtype}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class ImagePair:
    color: Image
    thermal: Image
    condition: str = "unknown"

    def __post_init__(self):
        if self.color.channels != 3:
            raise ValueError("color frame must have 3 channels")
        if self.thermal.channels != 1:
            raise ValueError("thermal frame must have 1 channel")
        if (self.color.height, self.color.width) != (self.thermal.height, self.thermal.width):
            raise ValueError("color and thermal frames must be spatially aligned")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize with half-pixel center alignment; values rounded
    half-up to the nearest 8-bit level."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = img.height, img.width
    if (out_h, out_w) == (h, w):
        return Image(img.data.copy())
    src = img.data.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return Image(np.floor(out + 0.5).clip(0, 255).astype(np.uint8))


def mean_pixel(img: Image) -> float:
    """Mean over all samples of all channels, normalized to [0, 1]."""
    return float(img.data.mean() / 255.0)


def percentile(img: Image, p: float) -> int:
    """Nearest-rank percentile over all samples: rank = ceil(p/100 * N),
    1-indexed; p = 0 maps to rank 1. Returns an 8-bit value that occurs
    in the image."""
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    samples = np.sort(img.data, axis=None)
    n = samples.size
    rank = max(1, int(np.ceil(p / 100.0 * n)))
    return int(samples[rank - 1])


# PGM (P5) / PPM (P6) I/O ------------------------------------------------


def write_image(path, img: Image):
    """Write 1-channel images as binary PGM (P5), 3-channel as PPM (P6)."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.data.tobytes())


def read_image(path) -> Image:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic, rest = raw.split(None, 1)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported magic {magic!r}")
        fields = []
        pos = 0
        while len(fields) < 3:
            while pos < len(rest) and rest[pos : pos + 1].isspace():
                pos += 1
            if rest[pos : pos + 1] == b"#":  # comment line
                pos = rest.index(b"\n", pos) + 1
                continue
            end = pos
            while end < len(rest) and not rest[end : end + 1].isspace():
                end += 1
            fields.append(int(rest[pos:end]))
            pos = end
        pos += 1  # single whitespace byte after maxval
        width, height, maxval = fields
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        channels = 1 if magic == b"P5" else 3
        data = np.frombuffer(rest, dtype=np.uint8, count=height * width * channels, offset=pos)
        return Image(data.reshape(height, width, channels).copy())
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed PGM/PPM file ({exc})") from exc
