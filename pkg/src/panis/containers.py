"""Array container file format.

A container is a single file holding named double-precision arrays:
a textual header -- the magic line ``PANISBOX1`` followed by one line per
array (``<name> f64 <dim0> <dim1> ...``) and a blank line -- then the raw
little-endian, row-major payloads concatenated in header order.

Names must be non-empty and whitespace-free; ``/`` is the conventional
namespace separator (``psi_x/00_conv/weight``). The effective run
configuration travels inside the container as a ``config/text`` array of
byte values so every output is self-describing.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

MAGIC = b"PANISBOX1"
CONFIG_ARRAY = "config/text"


def _check_name(name: str) -> None:
    if not name or any(ch.isspace() for ch in name):
        raise ConfigError(f"invalid container array name: {name!r}")


def encode_text(text: str) -> np.ndarray:
    """Encode a UTF-8 string as an f64 array of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(values: np.ndarray) -> str:
    return np.asarray(values, dtype=np.float64).astype(np.uint8).tobytes().decode("utf-8")


def write_container(path, arrays: dict, *, config_text: str | None = None) -> None:
    """Write named arrays to ``path``; optionally echo the config text."""
    items: list[tuple[str, np.ndarray]] = []
    for name, arr in arrays.items():
        _check_name(name)
        # asarray keeps 0-dim shapes, unlike ascontiguousarray
        items.append((name, np.asarray(arr, dtype=np.float64, order="C")))
    if config_text is not None:
        items.append((CONFIG_ARRAY, encode_text(config_text)))

    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        for name, arr in items:
            dims = " ".join(str(d) for d in arr.shape)
            line = f"{name} f64 {dims}".rstrip() + "\n"
            fh.write(line.encode("ascii"))
        fh.write(b"\n")
        for _, arr in items:
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_container(path) -> dict:
    """Read a container; returns arrays keyed by name, in file order."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a container file (bad magic {magic!r})")
        headers: list[tuple[str, tuple[int, ...]]] = []
        while True:
            line = fh.readline()
            if not line:
                raise ConfigError(f"{path}: truncated header")
            line = line.rstrip(b"\n")
            if not line:
                break
            fields = line.decode("ascii").split()
            if len(fields) < 2 or fields[1] != "f64":
                raise ConfigError(f"{path}: malformed header line {line!r}")
            shape = tuple(int(d) for d in fields[2:])
            headers.append((fields[0], shape))
        out: dict[str, np.ndarray] = {}
        for name, shape in headers:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigError(f"{path}: truncated payload for array {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out


def container_config(arrays: dict) -> str | None:
    """Extract the echoed config text from a read container, if present."""
    if CONFIG_ARRAY not in arrays:
        return None
    return decode_text(arrays[CONFIG_ARRAY])
