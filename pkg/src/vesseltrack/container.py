"""Length-prefixed JSON manifest + raw blob container.

Dataset (ADS) and weight (AWT) files share one framing: an 8-byte
little-endian unsigned length, the UTF-8 JSON manifest of that length, then
the raw payload bytes.  Manifests are serialized with sorted keys and no
whitespace so identical content yields identical bytes.
"""

from __future__ import annotations

import json
import struct

from .errors import FormatError

_PREFIX = struct.Struct("<Q")


def encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str, manifest: dict, chunks) -> None:
    """Write the framed manifest followed by the payload chunks."""
    header = encode_manifest(manifest)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def read_manifest(path: str) -> tuple[dict, int]:
    """Return (manifest, payload byte offset); raises FormatError on damage."""
    with open(path, "rb") as f:
        raw = f.read(_PREFIX.size)
        if len(raw) != _PREFIX.size:
            raise FormatError("container: missing length prefix")
        (length,) = _PREFIX.unpack(raw)
        header = f.read(length)
    if len(header) != length:
        raise FormatError("container: truncated manifest")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("container: manifest is not valid JSON") from e
    if not isinstance(manifest, dict):
        raise FormatError("container: manifest must be a JSON object")
    return manifest, _PREFIX.size + length
