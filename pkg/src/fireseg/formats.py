"""All persistent file formats.

Binary formats are little-endian with 4-byte magics:

  FSK1 feature stack: magic, u32 C, H, W; C x (u32 length + UTF-8 channel
       name); C*H*W float32 values, channel-major then row-major.
  MSK1 label mask: magic, u32 H, W; H*W bytes valued 0/1/2.
  UNC1 checkpoint: magic, u32 in_channels, init_features, depth,
       num_classes, u64 seed, u32 tensor count; per tensor u32 ndim,
       u32 dims..., float32 data. Tensors appear in topology order. A
       sidecar CSV next to the file stores the validation metrics.

Tile manifests and metric tables are CSV. Every writer is atomic
(write to a temp file in the same directory, then rename).
"""

from __future__ import annotations

import csv
import json
import os
import struct
from datetime import date
from pathlib import Path

import numpy as np

from .data import (
    CATEGORICAL,
    Channel,
    FeatureSchema,
    GridDay,
    NUMERIC,
    ScalingParams,
    TileSet,
    TileSpec,
)
from .unet import UNetConfig, UNetParams, init_params

MAGIC_STACK = b"FSK1"
MAGIC_MASK = b"MSK1"
MAGIC_CHECKPOINT = b"UNC1"

MANIFEST_HEADER = ["day_id", "row_off", "col_off", "tile_class", "provenance"]

# prediction rendering palette (RGB)
PALETTE = {
    "no_fire": (0, 0, 0),
    "fire": (220, 40, 30),
    "water": (40, 80, 200),
    "false_positive": (255, 150, 30),
    "false_negative": (230, 40, 230),
    "gutter": (255, 255, 255),
}


class FormatError(ValueError):
    """A file does not parse as the format it claims to be."""


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, payload: str) -> None:
    atomic_write_bytes(path, payload.encode("utf-8"))


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


# ---------------------------------------------------------------------------
# feature stacks and masks


def write_stack(path: Path, names: list[str], features: np.ndarray) -> None:
    if features.ndim != 3 or features.shape[0] != len(names):
        raise FormatError(f"stack shape {features.shape} does not match {len(names)} channel names")
    c, h, w = features.shape
    parts = [MAGIC_STACK, struct.pack("<III", c, h, w)]
    for name in names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(features, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_stack(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC_STACK:
            raise FormatError(f"{path}: not a feature stack (bad magic)")
        c, h, w = struct.unpack("<III", _read_exact(f, 12, "dimensions"))
        names = []
        for _ in range(c):
            (n,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            names.append(_read_exact(f, n, "channel name").decode("utf-8"))
        data = np.frombuffer(_read_exact(f, 4 * c * h * w, "float payload"), dtype="<f4")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    features = data.reshape(c, h, w).astype(np.float32)
    if not np.all(np.isfinite(features)):
        raise FormatError(f"{path}: stack contains non-finite values")
    return names, features


def write_mask(path: Path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-d, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 2):
        raise FormatError("mask values must be in {0,1,2}")
    h, w = mask.shape
    payload = MAGIC_MASK + struct.pack("<II", h, w) + mask.astype(np.uint8).tobytes()
    atomic_write_bytes(path, payload)


def read_mask(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC_MASK:
            raise FormatError(f"{path}: not a mask file (bad magic)")
        h, w = struct.unpack("<II", _read_exact(f, 8, "dimensions"))
        data = np.frombuffer(_read_exact(f, h * w, "mask payload"), dtype=np.uint8)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    mask = data.reshape(h, w).copy()
    if mask.size and mask.max() > 2:
        raise FormatError(f"{path}: mask holds values outside {{0,1,2}}")
    return mask


def day_paths(directory: Path, day_id: date) -> tuple[Path, Path]:
    stem = day_id.isoformat()
    return Path(directory) / f"{stem}.fsk", Path(directory) / f"{stem}.msk"


def write_day(directory: Path, day: GridDay, names: list[str]) -> None:
    stack_path, mask_path = day_paths(directory, day.day_id)
    write_stack(stack_path, names, day.features)
    write_mask(mask_path, day.mask)


def read_day(directory: Path, day_id: date) -> tuple[GridDay, list[str]]:
    stack_path, mask_path = day_paths(directory, day_id)
    names, features = read_stack(stack_path)
    mask = read_mask(mask_path)
    return GridDay(day_id, features, mask), names


# ---------------------------------------------------------------------------
# schema / scaling / splits (JSON sidecars)


def write_schema(path: Path, schema: FeatureSchema) -> None:
    doc = {
        "channels": [
            {"name": ch.name, "kind": ch.kind, "categories": list(ch.categories)}
            for ch in schema.channels
        ]
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_schema(path: Path) -> FeatureSchema:
    doc = json.loads(Path(path).read_text())
    channels = []
    for entry in doc["channels"]:
        kind = entry["kind"]
        if kind not in (NUMERIC, CATEGORICAL):
            raise FormatError(f"{path}: unknown channel kind {kind!r}")
        channels.append(Channel(entry["name"], kind, tuple(entry.get("categories", ()))))
    return FeatureSchema(tuple(channels))


def write_scaling(path: Path, params: ScalingParams) -> None:
    doc = {
        "channels": [
            {"index": i, "name": n, "min": lo, "max": hi}
            for i, n, lo, hi in zip(params.indices, params.names, params.mins, params.maxs)
        ]
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_scaling(path: Path) -> ScalingParams:
    doc = json.loads(Path(path).read_text())
    rows = doc["channels"]
    return ScalingParams(
        tuple(int(r["index"]) for r in rows),
        tuple(r["name"] for r in rows),
        tuple(float(r["min"]) for r in rows),
        tuple(float(r["max"]) for r in rows),
    )


def write_splits(path: Path, train_val: list[date], holdout: list[date]) -> None:
    doc = {
        "train_val": [d.isoformat() for d in train_val],
        "holdout": [d.isoformat() for d in holdout],
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_splits(path: Path) -> tuple[list[date], list[date]]:
    doc = json.loads(Path(path).read_text())
    return (
        [date.fromisoformat(s) for s in doc["train_val"]],
        [date.fromisoformat(s) for s in doc["holdout"]],
    )


def write_rule(path: Path, rule) -> None:
    """Planted-rule ground truth (generator output, consumed by evaluation tools)."""
    doc = {
        "channel_a": rule.channel_a,
        "channel_b": rule.channel_b,
        "channel_c": rule.channel_c,
        "coef_a": rule.coef_a,
        "coef_b": rule.coef_b,
        "coef_c": rule.coef_c,
        "gain": rule.gain,
        "bias": rule.bias,
        "spread_p1": rule.spread_p1,
        "spread_p2": rule.spread_p2,
        "static_channels": list(rule.static_channels),
        "dynamic_channels": list(rule.dynamic_channels),
        "deterministic_level": rule.deterministic_level,
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_rule(path: Path):
    from .synthetic import PlantedRule

    doc = json.loads(Path(path).read_text())
    return PlantedRule(
        channel_a=int(doc["channel_a"]),
        channel_b=int(doc["channel_b"]),
        channel_c=int(doc["channel_c"]),
        coef_a=float(doc["coef_a"]),
        coef_b=float(doc["coef_b"]),
        coef_c=float(doc["coef_c"]),
        gain=float(doc["gain"]),
        bias=float(doc["bias"]),
        spread_p1=float(doc["spread_p1"]),
        spread_p2=float(doc["spread_p2"]),
        static_channels=tuple(doc["static_channels"]),
        dynamic_channels=tuple(doc["dynamic_channels"]),
        deterministic_level=doc.get("deterministic_level"),
    )


# ---------------------------------------------------------------------------
# tile manifests


def write_manifest(path: Path, tileset: TileSet) -> None:
    lines = [",".join(MANIFEST_HEADER)]
    for s in tileset.specs:
        lines.append(
            f"{s.day_id.isoformat()},{s.row_off},{s.col_off},{s.tile_class},{tileset.provenance}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: Path) -> TileSet:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header {reader.fieldnames} != {MANIFEST_HEADER}")
        specs = []
        provenances = set()
        for row in reader:
            specs.append(
                TileSpec(
                    date.fromisoformat(row["day_id"]),
                    int(row["row_off"]),
                    int(row["col_off"]),
                    row["tile_class"],
                )
            )
            provenances.add(row["provenance"])
    if len(provenances) != 1:
        raise FormatError(f"{path}: manifest mixes provenances {sorted(provenances)}")
    return TileSet(tuple(specs), provenances.pop())


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path: Path, params: UNetParams, metrics: dict[str, float] | None = None) -> None:
    cfg = params.config
    parts = [
        MAGIC_CHECKPOINT,
        struct.pack(
            "<IIIIQ", cfg.in_channels, cfg.init_features, cfg.depth, cfg.num_classes, cfg.seed
        ),
    ]
    tensors = params.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))
    if metrics is not None:
        keys = list(metrics)
        rows = [",".join(keys), ",".join(repr(float(metrics[k])) for k in keys)]
        atomic_write_text(checkpoint_metrics_path(path), "\n".join(rows) + "\n")


def checkpoint_metrics_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".metrics.csv")


def read_checkpoint(path: Path) -> UNetParams:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC_CHECKPOINT:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        in_ch, feats, depth, classes, seed = struct.unpack(
            "<IIIIQ", _read_exact(f, 24, "network configuration")
        )
        config = UNetConfig(
            in_channels=in_ch, init_features=feats, depth=depth, num_classes=classes, seed=seed
        )
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = []
        for i in range(count):
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "tensor shape"))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * size, f"tensor {i} payload"), dtype="<f4")
            tensors.append(data.reshape(shape).astype(np.float32))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    # reuse a freshly structured parameter set to validate shapes against config
    template = init_params(config)
    return template.with_tensors(tensors)


def read_checkpoint_metrics(path: Path) -> dict[str, float]:
    with open(checkpoint_metrics_path(path), newline="") as f:
        reader = csv.DictReader(f)
        row = next(reader)
    return {k: float(v) for k, v in row.items()}


# ---------------------------------------------------------------------------
# metric tables

VALIDATION_COLUMNS = [
    "tr",
    "fire_buffer",
    "buffer_radius",
    "init_features",
    "es_metric",
    "fold",
    "epoch",
    "sensitivity",
    "specificity",
    "sh1",
    "sh2",
    "sensitivity_full",
    "specificity_full",
    "sh1_full",
    "sh2_full",
]

HOLDOUT_COLUMNS = [
    "checkpoint",
    "holdout_days",
    "tiles",
    "sensitivity",
    "specificity",
    "sensitivity_full",
    "specificity_full",
]


def metric_row(prefix: list, sens: float, spec: float, sh1: float, sh2: float) -> list[str]:
    return [str(v) for v in prefix] + [
        f"{sens:.4f}",
        f"{spec:.4f}",
        f"{sh1:.4f}",
        f"{sh2:.4f}",
        repr(float(sens)),
        repr(float(spec)),
        repr(float(sh1)),
        repr(float(sh2)),
    ]


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"row width {len(row)} != header width {len(header)}")
    lines = [",".join(header)] + [",".join(row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# prediction rendering (binary PPM)


def render_mask(mask: np.ndarray) -> np.ndarray:
    """Ground-truth panel: black land, red fire, blue water."""
    rgb = np.zeros(mask.shape + (3,), np.uint8)
    rgb[mask == 0] = PALETTE["no_fire"]
    rgb[mask == 1] = PALETTE["fire"]
    rgb[mask == 2] = PALETTE["water"]
    return rgb


def render_prediction(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Prediction panel with error overlay: orange FP, magenta FN."""
    rgb = np.zeros(truth.shape + (3,), np.uint8)
    fire = truth == 1
    land = truth != 2
    predf = pred.astype(bool)
    rgb[land & ~fire & ~predf] = PALETTE["no_fire"]
    rgb[fire & predf] = PALETTE["fire"]
    rgb[truth == 2] = PALETTE["water"]
    rgb[land & ~fire & predf] = PALETTE["false_positive"]
    rgb[fire & ~predf] = PALETTE["false_negative"]
    return rgb


def render_panels(truth: np.ndarray, pred: np.ndarray, gutter: int = 2) -> np.ndarray:
    """Side-by-side ground truth | prediction image."""
    left = render_mask(truth)
    right = render_prediction(pred, truth)
    gap = np.full((truth.shape[0], gutter, 3), PALETTE["gutter"], np.uint8)
    return np.concatenate([left, gap, right], axis=1)


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"expected [H,W,3] uint8 image, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + rgb.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM")
    fields, idx = [], 2
    while len(fields) < 3:
        while idx < len(raw) and raw[idx : idx + 1].isspace():
            idx += 1
        start = idx
        while idx < len(raw) and not raw[idx : idx + 1].isspace():
            idx += 1
        fields.append(int(raw[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported max value {maxval}")
    data = np.frombuffer(raw[idx:], np.uint8)
    if data.size != h * w * 3:
        raise FormatError(f"{path}: payload size mismatch")
    return data.reshape(h, w, 3).copy()
