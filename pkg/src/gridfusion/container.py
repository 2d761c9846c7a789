"""Flat binary container: a text header plus raw little-endian arrays.

Layout, byte exact:

    GRIDFUSION-CONTAINER 1\n
    kind=<kind>\n
    <key>=<value>\n            (zero or more, insertion order)
    array <name> <f4|f8> <d0,d1,...>\n   (one per array, storage order)
    end-header\n
    <raw array bytes, little endian, in manifest order>

Datasets store float32 payloads; checkpoints store float64 parameters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

Array = np.ndarray

_MAGIC = "GRIDFUSION-CONTAINER 1"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def write_container(
    path: str | Path,
    kind: str,
    header: dict[str, str],
    arrays: list[tuple[str, Array]],
) -> None:
    lines = [_MAGIC, f"kind={kind}"]
    for key, value in header.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ContainerError(f"illegal header entry '{key}'")
        lines.append(f"{key}={value}")
    payload = []
    for name, arr in arrays:
        if " " in name:
            raise ContainerError(f"array name '{name}' must not contain spaces")
        arr = np.asarray(arr)
        code = {np.dtype("float32"): "f4", np.dtype("float64"): "f8"}.get(arr.dtype)
        if code is None:
            raise ContainerError(f"array '{name}' has unsupported dtype {arr.dtype}")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {code} {shape}")
        payload.append(arr.astype(_DTYPES[code]).tobytes(order="C"))
    blob = ("\n".join(lines) + "\nend-header\n").encode("ascii") + b"".join(payload)
    Path(path).write_bytes(blob)


def read_container(
    path: str | Path, expect_kind: str | None = None
) -> tuple[str, dict[str, str], dict[str, Array]]:
    raw = Path(path).read_bytes()
    end_marker = b"end-header\n"
    split = raw.find(end_marker)
    if split < 0:
        raise ContainerError(f"{path}: header terminator missing (no end-header line)")
    try:
        text = raw[:split].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ContainerError(f"{path}: header is not ascii: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ContainerError(
            f"{path}: bad magic bytes, expected '{_MAGIC}', got '{lines[0] if lines else ''}'"
        )
    if not lines[1].startswith("kind="):
        raise ContainerError(f"{path}: missing kind field after magic")
    kind = lines[1][len("kind="):]
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: kind is '{kind}', expected '{expect_kind}'")

    header: dict[str, str] = {}
    manifest: list[tuple[str, np.dtype, tuple[int, ...]]] = []
    for line in lines[2:]:
        if line.startswith("array "):
            parts = line.split(" ")
            if len(parts) != 4 or parts[2] not in _DTYPES:
                raise ContainerError(f"{path}: malformed manifest line '{line}'")
            shape = tuple(int(d) for d in parts[3].split(",")) if parts[3] else ()
            manifest.append((parts[1], _DTYPES[parts[2]], shape))
        elif "=" in line:
            key, value = line.split("=", 1)
            header[key] = value
        else:
            raise ContainerError(f"{path}: malformed header line '{line}'")

    offset = split + len(end_marker)
    arrays: dict[str, Array] = {}
    for name, dtype, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ContainerError(
                f"{path}: truncated while reading array '{name}': need bytes "
                f"[{offset}, {offset + nbytes}), file has {len(raw)}"
            )
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(
            f"{path}: {len(raw) - offset} trailing bytes after offset {offset}"
        )
    return kind, header, arrays
