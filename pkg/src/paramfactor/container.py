"""Binary container: 8-byte magic, plain-text header, raw float64 arrays.

Layout:
    bytes 0..8    magic b"PFCKPT\\x00\\x01"
    header        UTF-8 "key: value" lines, one per line, ending with a
                  blank line; array manifest entries use the key "array"
                  with value "<name> <d0xd1x...> <byte offset> <count>"
    payload       the arrays, concatenated little-endian float64, in
                  manifest order

Offsets are relative to the first payload byte. The reader validates the
manifest entry by entry so corruption is reported by name.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"PFCKPT\x00\x01"


class ContainerError(ValueError):
    """Corrupt or malformed container file."""


def write_container(
    path: str | Path, header: dict[str, str], arrays: dict[str, np.ndarray]
) -> None:
    """Write scalars and arrays. Arrays are emitted in sorted-name order so
    the same content always produces the same bytes."""
    lines = []
    for key in sorted(header):
        value = header[key]
        if "\n" in key or "\n" in value or key == "array":
            raise ValueError(f"invalid header entry {key!r}")
        lines.append(f"{key}: {value}")

    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"array: {name} {shape} {offset} {arr.size}")
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic; not a container file")
    body = raw[len(MAGIC) :]
    sep = body.find(b"\n\n")
    if sep < 0:
        raise ContainerError(f"{path}: header terminator not found")
    header_text = body[:sep].decode("utf-8")
    payload = body[sep + 2 :]

    header: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in header_text.splitlines():
        if ": " not in line:
            raise ContainerError(f"{path}: malformed header line {line!r}")
        key, value = line.split(": ", 1)
        if key != "array":
            header[key] = value
            continue
        parts = value.split(" ")
        if len(parts) != 4:
            raise ContainerError(f"{path}: malformed manifest entry {value!r}")
        name, shape_s, offset_s, count_s = parts
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        manifest.append((name, shape, int(offset_s), int(count_s)))

    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, shape, offset, count in manifest:
        expected_count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count != expected_count:
            raise ContainerError(f"{path}: manifest entry '{name}': count does not match shape")
        if offset != expected_offset:
            raise ContainerError(f"{path}: manifest entry '{name}': non-contiguous offset")
        end = offset + count * 8
        if end > len(payload):
            raise ContainerError(f"{path}: manifest entry '{name}': payload truncated")
        arrays[name] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).copy()
        expected_offset = end
    if expected_offset != len(payload):
        raise ContainerError(f"{path}: {len(payload) - expected_offset} trailing payload bytes")
    return header, arrays
