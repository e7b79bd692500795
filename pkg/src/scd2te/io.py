"""Images, masks, dataset manifests and the binary model file.

Model file layout (all integers little-endian)::

    b"SCD2TE"  u16 version
    block*     tag: 4 ASCII bytes, u32 payload length, payload, u32 CRC32(tag + payload)

Blocks appear in a fixed order: ``CONF`` (canonical JSON of the config),
then per layer ``DICT``, ``COMP``, ``SCAL``, ``ENSM``, ``WARN``, and a final
empty ``END.``.  Floats are IEEE-754 binary64, counts u32.  Trees are written
in preorder, one node as ``u8 is_leaf, u32 feature_index, f64 threshold|response``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import boosting as B
from . import csc
from .errors import FormatError, IntegrityError, ManifestError
from .pipeline import FORMAT_VERSION, Layer, ModelConfig, ScD2TEModel, LUMA

MAGIC = b"SCD2TE"
SPLITS = ("train", "validation", "same_test", "different_test")

# -- images -------------------------------------------------------------------


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary PGM (P5) samples and maxval; 16-bit samples are big-endian."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from None
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1 or len(data)
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PGM header")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * dtype.itemsize
    if len(data) - pos < n:
        raise FormatError(f"{path}: truncated PGM raster")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.int64), maxval


def _is_pgm(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(1) == b"P"
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from None


def _open_png(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from None
    if img.format != "PNG":
        raise FormatError(f"{path}: unsupported format {img.format}")
    return img


def _read_scaled(path) -> np.ndarray:
    if _is_pgm(path):
        arr, maxval = read_pgm(path)
        return arr / maxval
    img = _open_png(path)
    if img.mode == "P":
        img = img.convert("RGBA" if "transparency" in img.info else "RGB")
    if img.mode in ("LA", "1"):
        img = img.convert("L")
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr / 255.0
    if img.mode.startswith("I"):
        return arr.astype(np.float64) / 65535.0
    raise FormatError(f"{path}: unsupported pixel mode {img.mode}")


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb[:, :, :3] @ LUMA


def load_image(path, color_mode: str = "luminance") -> np.ndarray:
    """Image scaled to [0, 1]: ``(H, W)`` luminance or ``(H, W, 3)`` per channel."""
    x = _read_scaled(path)
    if x.ndim == 3:
        x = x[:, :, :3]
        if color_mode == "luminance":
            x = to_luminance(x)
    elif color_mode == "per_channel":
        x = np.repeat(x[:, :, None], 3, axis=2)
    return np.clip(x, 0.0, 1.0)


def load_mask(path) -> np.ndarray:
    """Binary ``uint8`` mask: any nonzero sample (in any channel) is foreground."""
    arr = read_pgm(path)[0] if _is_pgm(path) else np.asarray(_open_png(path))
    if arr.ndim == 3:
        arr = arr.any(axis=2)
    return (arr != 0).astype(np.uint8)


def save_pgm(path, values: np.ndarray):
    """Write an 8-bit binary PGM (P5)."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise ValueError("PGM writer expects uint8 data")
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (constant grids map to 0)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255).astype(np.uint8)


# -- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    organ: str
    image_path: str
    mask_path: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = ()

    def split(self, *names: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split in names]

    def to_text(self) -> str:
        lines = [",".join([e.split, e.organ, e.image_path] + ([e.mask_path] if e.mask_path else []))
                 for e in self.entries]
        return "".join(line + "\n" for line in lines)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse ``split,organ,image_path[,mask_path]`` lines; ``#`` starts a comment.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc})") from None
    base = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        where = f"{path}:{lineno}"
        if len(fields) not in (3, 4) or not all(fields):
            raise ManifestError(f"{where}: expected split,organ,image_path[,mask_path]")
        split, organ, image = fields[:3]
        mask = fields[3] if len(fields) == 4 else None
        if split not in SPLITS:
            raise ManifestError(f"{where}: unknown split {split!r}")
        if split == "train" and mask is None:
            raise ManifestError(f"{where}: train entries need a mask_path")
        image = str(base / image) if not os.path.isabs(image) else image
        mask = str(base / mask) if mask and not os.path.isabs(mask) else mask
        if image in seen:
            raise ManifestError(f"{where}: duplicate image path {image}")
        seen.add(image)
        if check_paths:
            for p in (image, mask):
                if p is not None and not os.path.exists(p):
                    raise ManifestError(f"{where}: missing file {p}")
        entries.append(ManifestEntry(split, organ, image, mask))
    return DatasetManifest(tuple(entries))


# -- model file -----------------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["context_offsets"] = [list(o) for o in cfg.context_offsets]
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["ensemble"] = B.EnsembleConfig(**d["ensemble"])
    d["sparse"] = csc.SparseCodingConfig(**d["sparse"])
    d["context_offsets"] = tuple(tuple(o) for o in d["context_offsets"])
    return ModelConfig(**d)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _block(tag: bytes, payload: bytes) -> bytes:
    return (tag + struct.pack("<I", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(tag + payload)))


def _f64(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def _tree_bytes(tree: B.DecisionTree) -> bytes:
    out = [_u32(tree.node_count)]

    def walk(i):
        if tree.left[i] < 0:
            out.append(struct.pack("<BId", 1, 0, float(tree.value[i])))
        else:
            out.append(struct.pack("<BId", 0, int(tree.feature[i]), float(tree.threshold[i])))
            walk(tree.left[i])
            walk(tree.right[i])

    walk(0)
    return b"".join(out)


def _ensemble_bytes(ens: B.TreeEnsemble) -> bytes:
    head = _u32(0 if ens.mode == B.ADDITIVE else 1) + _f64([ens.base])
    head += _u32(ens.n_features, len(ens.trees)) + _f64(ens.weights)
    return head + b"".join(_tree_bytes(t) for t in ens.trees)


def model_bytes(model: ScD2TEModel) -> bytes:
    parts = [MAGIC, struct.pack("<H", model.format_version),
             _block(b"CONF", canonical_json(config_to_dict(model.config)))]
    for layer in model.layers:
        d = layer.dictionary
        parts.append(_block(b"DICT", _u32(layer.index, d.filter_side, d.atom_count) + _f64(d.atoms)))
        c = layer.compressor
        parts.append(_block(b"COMP", _u32(c.out_channels, c.in_channels)
                            + _f64(c.mean) + _f64(c.projection)))
        parts.append(_block(b"SCAL", _f64([layer.score_low, layer.score_high])))
        parts.append(_block(b"ENSM", _ensemble_bytes(layer.ensemble)))
        parts.append(_block(b"WARN", canonical_json(list(layer.warnings))))
    parts.append(_block(b"END.", b""))
    return b"".join(parts)


def save_model(model: ScD2TEModel, path):
    """Write atomically: the file appears only once fully written."""
    data = model_bytes(model)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise IntegrityError(f"block {self.name}: truncated payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.buf):
            raise IntegrityError(f"block {self.name}: {len(self.buf) - self.pos} trailing bytes")


def _read_tree(r: _Reader) -> B.DecisionTree:
    n = r.u32()
    nodes = [struct.unpack("<BId", r.take(13)) for _ in range(n)]
    feature, threshold, left, right, value = [], [], [], [], []
    pos = 0

    def build() -> int:
        nonlocal pos
        if pos >= n:
            raise IntegrityError(f"block {r.name}: malformed preorder tree")
        flag, f, v = nodes[pos]
        pos += 1
        i = len(feature)
        feature.append(-1 if flag else f)
        threshold.append(0.0 if flag else v)
        value.append(v if flag else 0.0)
        left.append(-1)
        right.append(-1)
        if not flag:
            left[i] = build()
            right[i] = build()
        return i

    build()
    if pos != n:
        raise IntegrityError(f"block {r.name}: tree node count mismatch")
    return B.DecisionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value))


def _read_ensemble(r: _Reader) -> B.TreeEnsemble:
    code = r.u32()
    if code not in (0, 1):
        raise IntegrityError(f"block {r.name}: unknown ensemble mode {code}")
    mode = (B.ADDITIVE, B.AVERAGED)[code]
    base = float(r.f64(1)[0])
    n_features, m = r.u32(2)
    weights = tuple(r.f64(m))
    trees = tuple(_read_tree(r) for _ in range(m))
    return B.TreeEnsemble(trees=trees, weights=weights, mode=mode, base=base,
                          n_features=n_features)


def model_from_bytes(data: bytes, source: str = "<bytes>") -> ScD2TEModel:
    if data[:6] != MAGIC:
        raise IntegrityError(f"{source}: bad magic, not a model file")
    if len(data) < 8:
        raise IntegrityError(f"{source}: truncated header")
    (version,) = struct.unpack("<H", data[6:8])
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{source}: unsupported format version {version}")
    pos = 8
    blocks = []
    while True:
        where = f"#{len(blocks)}"
        if pos + 8 > len(data):
            raise IntegrityError(f"{source}: block {where} truncated header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack("<I", data[pos + 4:pos + 8])
        end = pos + 8 + length
        if end + 4 > len(data):
            raise IntegrityError(f"{source}: block {where} ({tag!r}) truncated")
        payload = data[pos + 8:end]
        (crc,) = struct.unpack("<I", data[end:end + 4])
        if zlib.crc32(tag + payload) != crc:
            raise IntegrityError(f"{source}: checksum mismatch in block {where} ({tag!r})")
        blocks.append((tag, payload))
        pos = end + 4
        if tag == b"END.":
            break
    if pos != len(data):
        raise IntegrityError(f"{source}: trailing bytes after END block")

    def expect(i, tag):
        if i >= len(blocks) or blocks[i][0] != tag:
            raise IntegrityError(f"{source}: expected {tag.decode()} block at #{i}")
        return blocks[i][1]

    try:
        cfg = config_from_dict(json.loads(expect(0, b"CONF").decode("utf-8")))
        layers = []
        i = 1
        for ell in range(1, cfg.layer_count + 1):
            name = f"layer {ell}"
            r = _Reader(expect(i, b"DICT"), f"{name} DICT")
            index, side, count = r.u32(3)
            atoms = r.f64(side * side * count).reshape(side * side, count)
            r.done()
            dictionary = csc.LocalDictionary(atoms=atoms, filter_side=side)
            r = _Reader(expect(i + 1, b"COMP"), f"{name} COMP")
            out_c, in_c = r.u32(2)
            mean = r.f64(in_c)
            proj = r.f64(out_c * in_c).reshape(out_c, in_c)
            r.done()
            r = _Reader(expect(i + 2, b"SCAL"), f"{name} SCAL")
            low, high = r.f64(2)
            r.done()
            r = _Reader(expect(i + 3, b"ENSM"), f"{name} ENSM")
            ens = _read_ensemble(r)
            r.done()
            warnings = tuple(json.loads(expect(i + 4, b"WARN").decode("utf-8")))
            layers.append(Layer(index=index, dictionary=dictionary,
                                compressor=csc.Compressor(projection=proj, mean=mean),
                                ensemble=ens, score_low=float(low), score_high=float(high),
                                warnings=warnings))
            i += 5
        expect(i, b"END.")
        return ScD2TEModel(layers=tuple(layers), config=cfg, format_version=version)
    except IntegrityError:
        raise
    except (ValueError, TypeError, KeyError, struct.error) as exc:
        raise IntegrityError(f"{source}: invalid model contents ({exc})") from None


def load_model(path) -> ScD2TEModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read model ({exc})") from None
    return model_from_bytes(data, str(path))
