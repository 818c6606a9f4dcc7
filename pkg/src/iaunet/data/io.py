"""PNG image/mask IO and manifest loading.

Images are 8-bit RGB; masks are 8-bit grayscale with foreground 255 and
background 0 (binary) or raw class indices (multiclass). A manifest is a JSON
array of ``{"image", "mask", "identity", "tags"}`` objects whose paths are
relative to the manifest file.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataValidationError

_IMAGE_MODES = {"RGB", "RGBA", "L", "P", "1"}
_MASK_MODES = {"L", "P", "1"}


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"{path}: file not found")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataValidationError(f"{path}: unreadable image ({exc})") from exc
    return img


def read_image(path):
    """Return a ``uint8 [H,W,3]`` array."""
    img = _open(path)
    if img.mode not in _IMAGE_MODES:
        raise DataValidationError(f"{path}: unsupported image format/bit depth (mode {img.mode})")
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path, array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_image expects uint8 [H,W,3], got {arr.dtype} {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_mask_raw(path):
    img = _open(path)
    if img.mode not in _MASK_MODES:
        raise DataValidationError(f"{path}: unsupported mask format/bit depth (mode {img.mode})")
    if img.mode == "1":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def read_mask(path, binary=True):
    """Binary: ``float32 [H,W]`` in {0,1} (from {0,255}). Multiclass: int64 class map."""
    raw = read_mask_raw(path)
    if not binary:
        return raw.astype(np.int64)
    values = np.unique(raw)
    if not set(values.tolist()) <= {0, 255}:
        raise DataValidationError(
            f"{path}: binary mask must contain only 0/255, found {values.tolist()[:8]}")
    return (raw == 255).astype(np.float32)


def write_mask(path, mask, binary=True):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"write_mask expects [H,W], got {m.shape}")
    out = np.where(m > 0, 255, 0).astype(np.uint8) if binary else m.astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="L").save(path, format="PNG")


def image_to_chw(array):
    """uint8 ``[H,W,3]`` -> float32 ``[3,H,W]`` in [0,1]."""
    return np.ascontiguousarray(np.asarray(array, dtype=np.float32).transpose(2, 0, 1) / 255.0)


@dataclass
class SampleRecord:
    image_path: Path
    mask_path: Path | None
    identity_id: str
    split_tags: list = field(default_factory=list)
    record_id: str = ""

    def to_json(self, root):
        root = Path(root)
        d = {"image": _rel(self.image_path, root), "identity": self.identity_id,
             "tags": list(self.split_tags)}
        if self.mask_path is not None:
            d["mask"] = _rel(self.mask_path, root)
        return d


def _rel(path, root):
    try:
        return Path(path).relative_to(root).as_posix()
    except ValueError:
        return str(path)


def _parse_entries(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataValidationError(f"{manifest_path}: manifest not found")
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise DataValidationError(f"{manifest_path}: manifest must be a JSON array")
    return manifest_path.parent, entries


def load_dataset(manifest_path, binary=True, require_mask=True, num_classes=None):
    """Load and validate every record; all problems are reported together."""
    root, entries = _parse_entries(manifest_path)
    records, problems, seen = [], [], set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "image" not in e or "identity" not in e:
            problems.append(f"entry {i}: needs 'image' and 'identity'")
            continue
        unknown = set(e) - {"image", "mask", "identity", "tags"}
        if unknown:
            problems.append(f"entry {i}: unknown keys {sorted(unknown)}")
            continue
        img_path = (root / e["image"]).resolve()
        mask_path = (root / e["mask"]).resolve() if e.get("mask") else None
        for p in (img_path, mask_path):
            if p is None:
                continue
            if p in seen:
                problems.append(f"{p}: duplicate path")
            seen.add(p)
        if require_mask and mask_path is None:
            problems.append(f"{img_path}: record has no mask")
            continue
        try:
            image = read_image(img_path)
            if mask_path is not None:
                mask = read_mask(mask_path, binary=binary)
                if mask.shape != image.shape[:2]:
                    raise DataValidationError(
                        f"{mask_path}: mask {mask.shape[1]}x{mask.shape[0]} does not match "
                        f"image {image.shape[1]}x{image.shape[0]}")
                if not binary and num_classes is not None and mask.max() >= num_classes:
                    raise DataValidationError(f"{mask_path}: class index >= {num_classes}")
        except DataValidationError as exc:
            problems.append(str(exc))
            continue
        records.append(SampleRecord(img_path, mask_path, str(e["identity"]),
                                    list(e.get("tags", [])), record_id=str(e["image"])))
    if problems:
        raise DataValidationError("manifest validation failed:\n  " + "\n  ".join(problems))
    return records


def load_pool(manifest_path):
    """Hard-negative pool: same schema as a dataset manifest, masks optional."""
    from .triplets import HardNegativePool

    return HardNegativePool(load_dataset(manifest_path, require_mask=False))


def write_manifest(path, records):
    path = Path(path)
    path.write_text(json.dumps([r.to_json(path.parent) for r in records], indent=1) + "\n")
