"""Versioned JSON artifacts and deterministic PNG encoding.

Every document carries a top-level ``"schema": "gd/1"`` marker plus a
``kind``. Loading tolerates unknown fields (forward compatibility within the
major version) and rejects other major versions. Parse failures surface the
byte offset of the problem.
"""

from __future__ import annotations

import io
import json
from typing import Optional

import numpy as np
from PIL import Image

SCHEMA_MAJOR = 1


class SchemaVersionError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        super().__init__(message if offset is None
                         else f"{message} (byte offset {offset})")


def check_schema(doc: dict, kind: Optional[str] = None) -> dict:
    tag = doc.get("schema")
    if not isinstance(tag, str) or not tag.startswith("gd/"):
        raise SchemaVersionError(f"missing or foreign schema tag {tag!r}")
    major = tag[3:].split(".")[0]
    if major != str(SCHEMA_MAJOR):
        raise SchemaVersionError(f"unsupported schema major version {tag!r}")
    if kind is not None and doc.get("kind") != kind:
        raise SchemaVersionError(f"expected kind {kind!r}, got {doc.get('kind')!r}")
    return doc


def save_json(doc: dict, path) -> None:
    if "schema" not in doc:
        doc = {"schema": f"gd/{SCHEMA_MAJOR}", **doc}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path, kind: Optional[str] = None) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError(f"expected a JSON object in {path}")
    return check_schema(doc, kind)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] channel-first float image to HWC uint8."""
    arr = np.clip((image.astype(np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def encode_png(image: np.ndarray) -> bytes:
    """Deterministic PNG bytes for a [-1, 1] image (fixed encoder settings)."""
    img = Image.fromarray(image_to_uint8(image), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def save_png(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(image))
