"""Small shared helpers: deterministic JSON, fingerprints, seeds, image I/O."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image


def stable_dumps(obj: Any) -> str:
    """Serialize to JSON with a stable key order (used for files and digests)."""
    return json.dumps(obj, sort_keys=True, indent=2)


def write_json(path: Path | str, obj: Any) -> None:
    Path(path).write_text(stable_dumps(obj) + "\n", encoding="utf-8")


def read_json(path: Path | str) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def fingerprint(obj: Any) -> str:
    """Short stable digest of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def array_digest(arrays: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def derived_seed(base: int, tag: str) -> int:
    """Stable per-purpose seed so every sampling site draws from a named stream."""
    digest = hashlib.sha256(f"{base}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def load_image(path: Path | str) -> np.ndarray:
    """Load an image file as an HxWx3 uint8 RGB array."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image file not found: {p}")
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path: Path | str, pixels: np.ndarray) -> None:
    """Save an HxWx3 uint8 array losslessly (PNG keeps colors exact)."""
    Image.fromarray(pixels).save(Path(path), format="PNG")
