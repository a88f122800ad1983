"""On-disk formats.

``.fbag`` (little-endian)::

    header   magic "FBAG" | version u8 = 1 | dim u32 | class_count u32 | bag_count u64
    per bag  id_len u16 | image_id utf-8 | label u32 (1-based, 0xFFFFFFFF unlabeled)
             | n u32 | has_positions u8 | n*dim f32 | [n*2 f32 positions]

``.ml3w``::

    magic "ML3W" | version u8 = 1 | d u32 | k u32 | c u32 | q f64 | lambda f64
    | has_stats u8 | [mean d f64 | std d f64] | W d*k*c f32

``W`` is written class-major, then prototype, then dimension: value
``W[j, i, y]`` sits at position ``(y * k + i) * d + j``.

A JSON-lines variant of the bag format exists for debugging: a header object
followed by one bag object per line.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

import numpy as np

from .core import (Dataset, FeatureBag, FormatError, InvalidInputError,
                   PrototypeTensor, StandardizationStats)

BAG_MAGIC = b"FBAG"
MODEL_MAGIC = b"ML3W"
VERSION = 1
UNLABELED = 0xFFFFFFFF

_BAG_HEADER = struct.Struct("<4sBIIQ")
_BAG_RECORD = struct.Struct("<IIB")  # label, n, has_positions (after the id)
_MODEL_HEADER = struct.Struct("<4sBIIIddB")


def bag_record_size(bag: FeatureBag) -> int:
    n, d = bag.patches.shape
    size = 2 + len(bag.image_id.encode("utf-8")) + _BAG_RECORD.size + 4 * n * d
    if bag.positions is not None:
        size += 8 * n
    return size


def bag_file_size(dataset: Dataset) -> int:
    return _BAG_HEADER.size + sum(bag_record_size(b) for b in dataset.bags)


# ---------------------------------------------------------------------------
# binary bags


def _write_bag(f: BinaryIO, bag: FeatureBag) -> None:
    name = bag.image_id.encode("utf-8")
    if len(name) > 0xFFFF:
        raise InvalidInputError(f"image id longer than 65535 bytes: {bag.image_id[:40]}...")
    label = UNLABELED if bag.label is None else bag.label + 1
    f.write(struct.pack("<H", len(name)))
    f.write(name)
    f.write(_BAG_RECORD.pack(label, bag.n, bag.positions is not None))
    f.write(np.ascontiguousarray(bag.patches, dtype="<f4").tobytes())
    if bag.positions is not None:
        f.write(np.ascontiguousarray(bag.positions, dtype="<f4").tobytes())


def write_bags(path, dataset: Dataset, fmt: str = "bin") -> None:
    if fmt == "jsonl":
        return write_bags_jsonl(path, dataset)
    if fmt != "bin":
        raise InvalidInputError(f"unknown bag format {fmt!r}")
    with open(path, "wb") as f:
        f.write(_BAG_HEADER.pack(BAG_MAGIC, VERSION, dataset.d, dataset.c, dataset.m))
        for bag in dataset.bags:
            _write_bag(f, bag)


class _Reader:
    def __init__(self, f: BinaryIO):
        self.f = f
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        buf = self.f.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(buf)}", self.offset)
        self.offset += n
        return buf


def _read_bag_header(r: _Reader) -> tuple[int, int, int]:
    magic, version, dim, c, count = _BAG_HEADER.unpack(r.take(_BAG_HEADER.size, "header"))
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return dim, c, count


def iter_bags(path) -> Iterator[FeatureBag]:
    """Stream bags from a binary ``.fbag`` file one record at a time."""
    with open(path, "rb") as f:
        r = _Reader(f)
        dim, c, count = _read_bag_header(r)
        for _ in range(count):
            start = r.offset
            (id_len,) = struct.unpack("<H", r.take(2, "image id length"))
            try:
                image_id = r.take(id_len, "image id").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"image id is not valid utf-8: {exc}", start + 2)
            label, n, has_pos = _BAG_RECORD.unpack(r.take(_BAG_RECORD.size, "bag record"))
            if n == 0:
                raise FormatError("bag with zero patches", r.offset - _BAG_RECORD.size)
            X = np.frombuffer(r.take(4 * n * dim, "patch payload"), dtype="<f4").reshape(n, dim)
            pos = None
            if has_pos:
                pos = np.frombuffer(r.take(8 * n, "positions"), dtype="<f4").reshape(n, 2)
            if label == UNLABELED:
                label = None
            elif label == 0 or (c and label > c):
                raise FormatError(f"label {label} out of range 1..{c}", start)
            else:
                label -= 1
            yield FeatureBag(image_id, X.astype(np.float64),
                             label, None if pos is None else pos.astype(np.float64))
        if f.read(1):
            raise FormatError("trailing bytes after the last bag", r.offset)


def read_bags(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head != BAG_MAGIC and head[:1] == b"{":
        return read_bags_jsonl(path)
    with open(path, "rb") as f:
        dim, c, _ = _read_bag_header(_Reader(f))
    bags = tuple(iter_bags(path))
    if c == 0:
        labels = [b.label for b in bags if b.label is not None]
        c = max(labels) + 1 if labels else 0
    return Dataset(bags, dim, c)


# ---------------------------------------------------------------------------
# JSON lines


def write_bags_jsonl(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"format": "fbag-jsonl", "version": VERSION,
                            "dim": dataset.d, "class_count": dataset.c}) + "\n")
        for bag in dataset.bags:
            rec = {
                "image_id": bag.image_id,
                "label": None if bag.label is None else bag.label + 1,
                "patches": bag.patches.astype(np.float32).tolist(),
                "positions": None if bag.positions is None else bag.positions.astype(np.float32).tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def read_bags_jsonl(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise FormatError("empty jsonl file", 0)
    try:
        header = json.loads(lines[0])
        if header.get("format") != "fbag-jsonl":
            raise FormatError("first line is not an fbag-jsonl header", 0)
        bags = []
        for rec in map(json.loads, lines[1:]):
            label = rec.get("label")
            pos = rec.get("positions")
            bags.append(FeatureBag(rec["image_id"], np.array(rec["patches"], dtype=np.float64).reshape(-1, header["dim"]),
                                   None if label is None else int(label) - 1,
                                   None if pos is None else np.array(pos, dtype=np.float64)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed jsonl bag file: {exc}")
    c = header.get("class_count", 0)
    if c == 0:
        labels = [b.label for b in bags if b.label is not None]
        c = max(labels) + 1 if labels else 0
    return Dataset(tuple(bags), header["dim"], c)


# ---------------------------------------------------------------------------
# models


def write_model(path, W: PrototypeTensor, stats: Optional[StandardizationStats] = None) -> None:
    d, k, c = W.W.shape
    with open(path, "wb") as f:
        f.write(_MODEL_HEADER.pack(MODEL_MAGIC, VERSION, d, k, c, float(W.q), float(W.lam), stats is not None))
        if stats is not None:
            if stats.d != d:
                raise InvalidInputError(f"standardizer dimension {stats.d} differs from model dimension {d}")
            f.write(stats.mean.astype("<f8").tobytes())
            f.write(stats.std.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(W.W.transpose(2, 1, 0), dtype="<f4").tobytes())


def model_file_size(d: int, k: int, c: int, with_stats: bool) -> int:
    return _MODEL_HEADER.size + (16 * d if with_stats else 0) + 4 * d * k * c


def read_model(path) -> tuple[PrototypeTensor, Optional[StandardizationStats]]:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"truncated model header: expected {_MODEL_HEADER.size} bytes, got {len(data)}", 0)
    magic, version, d, k, c, q, lam, has_stats = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if has_stats not in (0, 1):
        raise FormatError(f"bad standardization flag {has_stats}", _MODEL_HEADER.size - 1)
    expected = model_file_size(d, k, c, bool(has_stats))
    if len(data) != expected:
        raise FormatError(f"model length mismatch: expected {expected} bytes for d={d} k={k} c={c}, "
                          f"got {len(data)}", min(len(data), expected))
    if math.isnan(q) or q < 1:
        raise FormatError(f"invalid q {q}", 17)
    off = _MODEL_HEADER.size
    stats = None
    if has_stats:
        mean = np.frombuffer(data, "<f8", d, off)
        std = np.frombuffer(data, "<f8", d, off + 8 * d)
        stats = StandardizationStats(mean.copy(), std.copy())
        off += 16 * d
    W = np.frombuffer(data, "<f4", d * k * c, off).reshape(c, k, d).transpose(2, 1, 0)
    return PrototypeTensor(W.astype(np.float64), q=q, lam=lam), stats


def write_stats_json(path, stats: StandardizationStats) -> None:
    Path(path).write_text(json.dumps({"mean": stats.mean.tolist(), "std": stats.std.tolist()}))


def read_stats_json(path) -> StandardizationStats:
    obj = json.loads(Path(path).read_text())
    return StandardizationStats(np.array(obj["mean"]), np.array(obj["std"]))
