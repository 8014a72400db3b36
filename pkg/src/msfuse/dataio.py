"""Bit-exact readers and writers for annotations, detections, manifests
and run configuration.

Annotation files use the bbGt text convention: a `% bbGt version=3`
header, then one entry per line as `label x y w h occluded ignore`
(occluded 0/1/2, ignore 0/1; extra columns are ignored on read).
Detection files carry `frame_id x y w h score` per line. All files are
UTF-8 with LF line endings; floats are written as shortest round-trip
decimals so write -> read -> write is byte-identical.
"""

import os

from .boxes import BBox
from .evaluation import GtEntry
from .imaging import ImagePair, read_image
from .synth import ManifestEntry

ANNOTATION_HEADER = "% bbGt version=3"

_OCC_TO_INT = {"none": 0, "partial": 1, "heavy": 2}
_INT_TO_OCC = {v: k for k, v in _OCC_TO_INT.items()}


def _fmt(x):
    """Shortest decimal that round-trips the float."""
    return repr(float(x))


def write_annotations(path, entries):
    lines = [ANNOTATION_HEADER]
    for e in entries:
        b = e.bbox
        lines.append(
            f"{e.label} {_fmt(b.x)} {_fmt(b.y)} {_fmt(b.w)} {_fmt(b.h)} "
            f"{_OCC_TO_INT[e.occlusion]} {1 if e.ignore else 0}"
        )
    _write_text(path, lines)


def read_annotations(path):
    lines = _read_lines(path)
    if not lines or lines[0] != ANNOTATION_HEADER:
        raise ValueError(f"{path}: missing annotation header {ANNOTATION_HEADER!r}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split(" ")
        if len(fields) < 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        try:
            label = fields[0]
            x, y, w, h = (float(v) for v in fields[1:5])
            occ = int(fields[5])
            ignore = int(fields[6])
            if occ not in _INT_TO_OCC or ignore not in (0, 1):
                raise ValueError("bad occlusion/ignore code")
            entries.append(
                GtEntry(bbox=BBox(x, y, w, h), label=label,
                        occlusion=_INT_TO_OCC[occ], ignore=bool(ignore))
            )
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed annotation line ({exc})") from exc
    return entries


def write_detections(path, rows):
    """rows: iterable of (frame_id, x, y, w, h, score)."""
    lines = []
    for frame_id, x, y, w, h, score in rows:
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {score}")
        lines.append(f"{frame_id} {_fmt(x)} {_fmt(y)} {_fmt(w)} {_fmt(h)} {_fmt(score)}")
    _write_text(path, lines)


def read_detections(path, known_frames=None):
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        fields = line.split(" ")
        if len(fields) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        frame_id = fields[0]
        if known_frames is not None and frame_id not in known_frames:
            raise ValueError(f"{path}:{lineno}: unknown frame id {frame_id!r}")
        try:
            x, y, w, h, score = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed detection line ({exc})") from exc
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"{path}:{lineno}: score outside [0, 1]")
        rows.append((frame_id, x, y, w, h, score))
    return rows


def write_manifest(path, entries):
    _write_text(path, [f"{e.frame_id} {e.split} {e.condition}" for e in entries])


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        fields = line.split(" ")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        entries.append(ManifestEntry(frame_id=fields[0], split=fields[1], condition=fields[2]))
    return entries


# Flat key = value run configuration ------------------------------------


def load_config(path, schema):
    """Parse `key = value` lines against a schema of {key: (type, default)}.

    Unknown keys are an error (no silent typos); missing keys take their
    documented default; a None default marks the key as required.
    """
    values = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line or line.startswith("#"):
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        if key not in schema:
            raise ValueError(f"{path}:{lineno}: unknown configuration key {key!r}")
        typ = schema[key][0]
        try:
            values[key] = _parse_value(typ, raw)
        except ValueError as exc:
            raise ValueError(
                f"{path}:{lineno}: key {key!r} expects {typ.__name__}: {exc}"
            ) from exc
    for key, (typ, default) in schema.items():
        if key not in values:
            if default is None:
                raise ValueError(f"{path}: missing required configuration key {key!r}")
            values[key] = default
    return values


def write_config(path, values):
    _write_text(path, [f"{k} = {_fmt(v) if isinstance(v, float) else v}"
                       for k, v in values.items()])


def _parse_value(typ, raw):
    if typ is bool:
        if raw in ("true", "false"):
            return raw == "true"
        raise ValueError(f"expected true/false, got {raw!r}")
    return typ(raw)


# Dataset loading --------------------------------------------------------


def load_frame(dataset_dir, entry: ManifestEntry):
    """Read one frame's image pair and annotations."""
    img_dir = os.path.join(dataset_dir, "images", entry.split)
    pair = ImagePair(
        color=read_image(os.path.join(img_dir, f"{entry.frame_id}_color.ppm")),
        thermal=read_image(os.path.join(img_dir, f"{entry.frame_id}_thermal.pgm")),
        condition=entry.condition,
    )
    gts = read_annotations(
        os.path.join(dataset_dir, "annotations", entry.split, f"{entry.frame_id}.txt")
    )
    return pair, gts


def load_split(dataset_dir, split):
    """All (manifest entry, ImagePair, [GtEntry]) records of a split."""
    entries = [e for e in read_manifest(os.path.join(dataset_dir, "manifest.txt"))
               if e.split == split]
    if not entries:
        raise ValueError(f"{dataset_dir}: manifest has no '{split}' frames")
    return [(e, *load_frame(dataset_dir, e)) for e in entries]


# Shared plumbing --------------------------------------------------------


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]
