"""Image and manifest files."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


def save_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB (PNG, or PPM by extension)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


@dataclass
class ManifestRecord:
    task: str
    instruction: str
    ref_paths: list[str]
    target_paths: list[str]
    bucket: int
    motion_score: float | None = None
    fg_mask_paths: list[str] | None = None
    weight: float = 1.0
    id: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        return cls(**d)


def write_manifest(path, records: list[ManifestRecord]) -> None:
    """One JSON object per line, UTF-8, LF-terminated. Written via a temp file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> list[ManifestRecord]:
    with open(path, encoding="utf-8") as f:
        return [ManifestRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def resolve(manifest_path, rel: str) -> Path:
    return Path(manifest_path).parent / rel
