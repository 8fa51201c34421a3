"""Image (PNG, binary PPM/PGM), Middlebury .flo and dataset-tree I/O."""
from __future__ import annotations

import re
from pathlib import Path

import cv2
import numpy as np

from ..config import read_kv, write_kv
from ..errors import FormatError, UsageError
from .synth import FrameSequence

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
FLO_MAGIC = np.float32(202021.25)
PNM_MAGIC = {b"P5": 1, b"P6": 3}


def _to_int(image: np.ndarray, bits: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = np.moveaxis(image, 0, -1)
        if image.shape[-1] == 1:
            image = image[..., 0]
    if image.ndim == 3 and image.shape[-1] != 3:
        raise UsageError(f"expected 1 or 3 channels, got {image.shape[-1]}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise UsageError("image values must lie in [0, 1]")
    if bits == 8:
        return np.round(image * 255).astype(np.uint8)
    if bits == 16:
        return np.round(image * 65535).astype(np.uint16)
    raise UsageError("bits must be 8 or 16")


def _from_int(arr: np.ndarray) -> np.ndarray:
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    img = arr.astype(np.float64) / scale
    if img.ndim == 2:
        return img[None]
    return np.moveaxis(img, -1, 0)


def write_png(path, image: np.ndarray, bits: int = 16) -> None:
    """``image`` is (C, H, W) or (H, W) in [0, 1]."""
    arr = _to_int(image, bits)
    if arr.ndim == 3:
        arr = arr[..., ::-1]  # RGB to BGR for OpenCV
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(arr))
    if not ok:
        raise FormatError(f"could not encode {path}")
    Path(path).write_bytes(buf.tobytes())


def read_png(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(PNG_SIGNATURE):
        raise FormatError(f"{path}: not a PNG file")
    arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FormatError(f"{path}: corrupt PNG")
    if arr.ndim == 3:
        if arr.shape[-1] == 4:
            arr = arr[..., :3]
        arr = arr[..., ::-1]
    return _from_int(arr)


_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in PNM_MAGIC:
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{path}: bad header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if not (0 < maxval < 65536) or width < 1 or height < 1:
        raise FormatError(f"{path}: bad header values {fields}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    pos += 1
    channels = PNM_MAGIC[magic]
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * channels
    body = raw[pos:pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width, channels)
    img = np.moveaxis(arr.astype(np.float64) / maxval, -1, 0)
    if img.max(initial=0) > 1:
        raise FormatError(f"{path}: sample above maxval")
    return img


def write_pnm(path, image: np.ndarray, bits: int = 16) -> None:
    arr = _to_int(image, bits)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    maxval = 255 if bits == 8 else 65535
    h, w = arr.shape[:2]
    body = arr.astype(">u2").tobytes() if bits == 16 else arr.tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + body)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    return read_png(path)


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        write_pnm(path, image, bits)
    else:
        write_png(path, image, bits)


def write_flo(path, flow: np.ndarray) -> None:
    """``flow`` is (2, H, W) with channel 0 = u (x) and 1 = v (y)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise UsageError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC.tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.moveaxis(flow, 0, -1).astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    if np.frombuffer(raw[:4], "<f4")[0] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic")
    w, h = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad size {w}x{h}")
    body = raw[12:]
    if len(body) != 8 * w * h:
        raise FormatError(f"{path}: expected {8 * w * h} data bytes, found {len(body)}")
    data = np.frombuffer(body, "<f4").reshape(h, w, 2)
    return np.moveaxis(data, -1, 0).astype(np.float32)


# dataset tree: <root>/<seq_id>/frame_%03d.png, alpha_%03d.png, fg_%03d.png,
# bg_%03d.png, flow_%03d.flo, occ_%03d.png, meta.txt

def save_sequence(directory, seq: FrameSequence) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        write_png(d / f"frame_{t:03d}.png", seq.frames[t])
        if seq.alpha is not None:
            write_png(d / f"alpha_{t:03d}.png", seq.alpha[t])
        if seq.fg is not None:
            write_png(d / f"fg_{t:03d}.png", seq.fg[t])
        if seq.bg is not None:
            write_png(d / f"bg_{t:03d}.png", seq.bg[t])
        if seq.flow is not None:
            write_flo(d / f"flow_{t:03d}.flo", seq.flow[t])
        if seq.occlusion is not None:
            write_png(d / f"occ_{t:03d}.png", seq.occlusion[t].astype(np.float64)[None], bits=8)
    meta = dict(seq.meta)
    meta["frames"] = len(seq)
    write_kv(d / "meta.txt", meta)


def load_sequence(directory) -> FrameSequence:
    d = Path(directory)
    if not (d / "meta.txt").exists():
        raise FormatError(f"{d}: missing meta.txt")
    meta = read_kv(d / "meta.txt")
    n = int(meta.get("frames", 0)) or len(list(d.glob("frame_*.png")))
    if n < 1:
        raise FormatError(f"{d}: no frames")

    def optional(prefix, reader, ext="png"):
        paths = [d / f"{prefix}_{t:03d}.{ext}" for t in range(n)]
        if not all(p.exists() for p in paths):
            return None
        return [reader(p) for p in paths]

    frames = optional("frame", read_png)
    if frames is None:
        raise FormatError(f"{d}: missing frame files")
    occ = optional("occ", read_png)
    seq = FrameSequence(
        frames=frames,
        alpha=optional("alpha", read_png),
        fg=optional("fg", read_png),
        flow=optional("flow", lambda p: read_flo(p).astype(np.float64), "flo"),
        bg=optional("bg", read_png),
        occlusion=None if occ is None else [o[0] > 0.5 for o in occ],
        meta=meta,
    )
    seq.validate()
    return seq


def save_dataset(root, sequences: dict[str, FrameSequence]) -> None:
    for seq_id, seq in sequences.items():
        save_sequence(Path(root) / seq_id, seq)


def list_sequences(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: not a dataset directory")
    return sorted(p.name for p in root.iterdir() if (p / "meta.txt").exists())


def load_dataset(root) -> dict[str, FrameSequence]:
    return {s: load_sequence(Path(root) / s) for s in list_sequences(root)}
