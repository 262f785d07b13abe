"""File formats: raw tensors, checkpoints, PPM/PGM images and JSON."""

from __future__ import annotations

import json
import struct
from io import BytesIO
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ContractError, IOFailure

MAGIC = b"MRTENSR1"


# ---------------------------------------------------------------------------
# tensor files: magic, u32 rank, u32 dims, little-endian f32 payload
# ---------------------------------------------------------------------------

def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:8] != MAGIC:
        raise IOFailure(f"{source}: not a tensor file (bad magic)")
    try:
        (rank,) = struct.unpack_from("<I", buf, 8)
        shape = struct.unpack_from(f"<{rank}I", buf, 12)
    except struct.error as exc:
        raise IOFailure(f"{source}: truncated header") from exc
    start = 12 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != start + 4 * n:
        raise IOFailure(f"{source}: payload has {len(buf) - start} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


def write_tensor(path, arr) -> None:
    _write_bytes(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(_read_bytes(path), str(path))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IOFailure(f"{path}: invalid JSON ({exc})") from exc


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    _write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_vocabulary(path) -> list[str]:
    names = read_json(path)
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ContractError(f"{path}: vocabulary must be a JSON array of strings")
    if not names:
        raise ContractError(f"{path}: vocabulary is empty")
    if any(not n.strip() for n in names):
        raise ContractError(f"{path}: class names must be non-blank")
    return names


# ---------------------------------------------------------------------------
# checkpoints: one tensor file per parameter plus manifest.json
# ---------------------------------------------------------------------------

def save_checkpoint(directory, store, config: Optional[dict] = None) -> Path:
    directory = Path(directory)
    entries = []
    for i, (name, t) in enumerate(store.items()):
        fname = f"t{i:04d}.mrt"
        write_tensor(directory / fname, t.data)
        entries.append({"name": name, "file": fname, "shape": list(t.shape),
                        "frozen": name in store.frozen})
    manifest = {"format": MAGIC.decode(), "tensors": entries}
    if config is not None:
        manifest["config"] = config
    write_json(directory / "manifest.json", manifest)
    return directory


def read_manifest(directory) -> dict:
    manifest = read_json(Path(directory) / "manifest.json")
    if manifest.get("format") != MAGIC.decode():
        raise IOFailure(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(directory, store) -> dict:
    """Copy every tensor of a checkpoint into ``store`` (names and shapes must match)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in store:
            raise ConfigError(f"checkpoint tensor {name!r} does not exist in the model")
        arr = read_tensor(directory / e["file"])
        target = store[name]
        if arr.shape != target.shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                              f"model expects {target.shape}")
        target.data[...] = arr.astype(target.dtype)
        seen.add(name)
    missing = [n for n, _ in store.items() if n not in seen]
    if missing:
        raise ConfigError(f"checkpoint lacks {len(missing)} model tensors, e.g. {missing[0]!r}")
    return manifest


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """RGB image as ``[3, H, W]`` float64 in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except FileNotFoundError as exc:
        raise IOFailure(f"cannot read image {path}: no such file") from exc
    except (OSError, UnidentifiedImageError) as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def write_ppm(path, img) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    _save_image(path, Image.fromarray(np.ascontiguousarray(arr), "RGB"))


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im, dtype=np.int64)
    except FileNotFoundError as exc:
        raise IOFailure(f"cannot read label map {path}: no such file") from exc
    except (OSError, UnidentifiedImageError) as exc:
        raise IOFailure(f"cannot read label map {path}: {exc}") from exc


def write_pgm(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ContractError("label values must fit in 0..255 for PGM output")
    _save_image(path, Image.fromarray(labels.astype(np.uint8), "L"))


def _save_image(path, im: Image.Image) -> None:
    out = BytesIO()
    im.save(out, format="PPM")  # Pillow writes P5 for mode L and P6 for RGB
    _write_bytes(path, out.getvalue())


def dump_masks(directory, mask_logits) -> list[Path]:
    """Write per-query mask probabilities as 8-bit PGM files."""
    directory = Path(directory)
    probs = 1.0 / (1.0 + np.exp(-np.asarray(mask_logits, dtype=np.float64)))
    paths = []
    for i, p in enumerate(probs):
        path = directory / f"mask_{i:03d}.pgm"
        write_pgm(path, np.round(p * 255.0).astype(np.int64))
        paths.append(path)
    return paths


def dump_slices(directory, slices: Sequence[np.ndarray]) -> list[Path]:
    directory = Path(directory)
    paths = []
    for i, s in enumerate(slices):
        path = directory / f"slice_{i:02d}.mrt"
        write_tensor(path, s)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# evaluation datasets: classes.json, images/*.ppm, labels/*.pgm, instances/*.pgm
# ---------------------------------------------------------------------------

def write_dataset(directory, images, labels, names: Sequence[str], instances=None) -> Path:
    directory = Path(directory)
    write_json(directory / "classes.json", list(names))
    for i, (img, lab) in enumerate(zip(images, labels)):
        write_ppm(directory / "images" / f"{i:04d}.ppm", img)
        write_pgm(directory / "labels" / f"{i:04d}.pgm", lab)
        if instances is not None:
            write_pgm(directory / "instances" / f"{i:04d}.pgm", instances[i])
    return directory


def list_dataset(directory) -> tuple[list[str], list[str]]:
    """Class names and sorted sample stems of a dataset directory."""
    directory = Path(directory)
    names = read_vocabulary(directory / "classes.json")
    stems = sorted(p.stem for p in (directory / "images").glob("*.ppm"))
    if not stems:
        raise IOFailure(f"{directory}/images holds no .ppm files")
    return names, stems
