"""Byte-level codecs.

LVNM (model):  b"LVNM", u16 version, u16 h, w, c, u16 num_classes, u16 layer count,
               per layer (u8 kind, u16 a, u16 b, u16 c), then every parameter
               tensor as little-endian float32, row-major, in layer order
               (weight before bias).
LVPN (patch):  b"LVPN", u16 version, u16 size, u16 channels, u8 domain,
               then size*size*channels little-endian float32, row-major.
PPM P6 / PGM P5 with maxval 255; byte v maps to v / 255.
"""

import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from localnoise.attacks.patch_attack import Patch
from localnoise.diffnet.dataset import Dataset
from localnoise.diffnet.layers import make_layer
from localnoise.diffnet.network import Network, trace_shapes
from localnoise.errors import FormatError, LocalNoiseError
from localnoise.pipeline.connectors.artifact_store import ArtifactStore
from localnoise.pipeline.schemas import LAYER_KIND_CODES, LayerSpec, NoiseDomain

MODEL_MAGIC = b"LVNM"
PATCH_MAGIC = b"LVPN"
FORMAT_VERSION = 1
FLOAT = np.dtype("<f4")

DOMAIN_CODES = {NoiseDomain.NETWORK: 0, NoiseDomain.IMAGE: 1}
KIND_BY_CODE = {code: kind for kind, code in LAYER_KIND_CODES.items()}

PathLike = Union[str, Path]


class _Reader:
    def __init__(self, payload: bytes, what: str):
        self.payload = payload
        self.offset = 0
        self.what = what

    def take(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise FormatError(f"truncated {self.what}: header ends at byte {len(self.payload)}", field="path")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def floats(self, count: int) -> np.ndarray:
        size = count * FLOAT.itemsize
        if self.offset + size > len(self.payload):
            raise FormatError(
                f"truncated {self.what}: need {size} parameter bytes at offset {self.offset}, "
                f"file has {len(self.payload) - self.offset}",
                field="path",
            )
        values = np.frombuffer(self.payload, dtype=FLOAT, count=count, offset=self.offset)
        self.offset += size
        return values

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise FormatError(f"{len(self.payload) - self.offset} trailing bytes in {self.what}", field="path")


def _layer_fields(spec: LayerSpec) -> Tuple[int, int, int]:
    if spec.kind == "conv2d":
        return spec.kernel, spec.out_channels, spec.padding
    if spec.kind == "maxpool2d":
        return spec.window, 0, 0
    if spec.kind == "dense":
        return spec.out_features, 0, 0
    return 0, 0, 0


def _layer_spec(code: int, a: int, b: int, c: int) -> LayerSpec:
    kind = KIND_BY_CODE.get(code)
    if kind is None:
        raise FormatError(f"unknown layer kind code {code}", field="path")
    if kind == "conv2d":
        return LayerSpec.conv2d(kernel=a, out_channels=b, padding=c)
    if kind == "maxpool2d":
        return LayerSpec.maxpool2d(window=a)
    if kind == "dense":
        return LayerSpec.dense(out_features=a)
    return LayerSpec(kind=kind)


def encode_model(net: Network) -> bytes:
    h, w, c = net.input_shape
    chunks = [
        struct.pack("<4sH", MODEL_MAGIC, FORMAT_VERSION),
        struct.pack("<HHHHH", h, w, c, net.num_classes, len(net.specs)),
    ]
    for spec in net.specs:
        chunks.append(struct.pack("<BHHH", LAYER_KIND_CODES[spec.kind], *_layer_fields(spec)))
    for layer, group in zip(net.layers, net.params):
        for name in sorted(group, key=lambda key: 0 if key == "weight" else 1):
            chunks.append(np.ascontiguousarray(group[name], dtype=FLOAT).tobytes())
    return b"".join(chunks)


def decode_model(payload: bytes) -> Network:
    reader = _Reader(payload, "model file")
    magic, version = reader.take("<4sH")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}, expected {MODEL_MAGIC!r}", field="path")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model version {version}", field="path")
    h, w, c, num_classes, count = reader.take("<HHHHH")
    try:
        specs = [_layer_spec(*reader.take("<BHHH")) for _ in range(count)]
        layers = [make_layer(spec) for spec in specs]
        shapes = trace_shapes(layers, (h, w, c), num_classes)
    except FormatError:
        raise
    except (LocalNoiseError, ValueError) as exc:
        raise FormatError(f"inconsistent model header: {exc}", field="path") from exc

    params = []
    for layer, shape in zip(layers, shapes):
        group = {}
        for name in sorted(layer.param_shapes(shape), key=lambda key: 0 if key == "weight" else 1):
            param_shape = layer.param_shapes(shape)[name]
            group[name] = reader.floats(int(np.prod(param_shape))).reshape(param_shape).astype(np.float32)
        params.append(group)
    reader.finish()
    return Network(specs, params, (h, w, c), num_classes)


def encode_patch(patch: Patch) -> bytes:
    s, _, c = patch.values.shape
    header = struct.pack("<4sHHHB", PATCH_MAGIC, FORMAT_VERSION, s, c, DOMAIN_CODES[patch.domain])
    return header + np.ascontiguousarray(patch.values, dtype=FLOAT).tobytes()


def decode_patch(payload: bytes) -> Patch:
    reader = _Reader(payload, "patch file")
    magic, version, s, c, domain_code = reader.take("<4sHHHB")
    if magic != PATCH_MAGIC:
        raise FormatError(f"bad patch magic {magic!r}, expected {PATCH_MAGIC!r}", field="path")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported patch version {version}", field="path")
    domains = {code: domain for domain, code in DOMAIN_CODES.items()}
    if domain_code not in domains or s == 0 or c == 0:
        raise FormatError(f"bad patch header (size={s}, channels={c}, domain={domain_code})", field="path")
    values = reader.floats(s * s * c).reshape(s, s, c).astype(np.float32)
    reader.finish()
    return Patch(values=values, domain=domains[domain_code])


def save_model(net: Network, path: PathLike) -> None:
    Path(path).write_bytes(encode_model(net))


def load_model(path: PathLike) -> Network:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"model file not found at {path}", field="model_path")
    return decode_model(payload)


def save_patch(patch: Patch, path: PathLike) -> None:
    Path(path).write_bytes(encode_patch(patch))


def load_patch(path: PathLike) -> Patch:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"patch file not found at {path}", field="patch_paths")
    return decode_patch(payload)


def to_bytes_255(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an [h, w, 3] image, got {image.shape}", field="image")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes_255(image).tobytes()


def encode_pgm(values: np.ndarray) -> bytes:
    if values.ndim != 2:
        raise FormatError(f"PGM needs a 2-D map, got {values.shape}", field="map")
    h, w = values.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes_255(values).tobytes()


def _header_tokens(payload: bytes, count: int) -> Tuple[List[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping # comments."""
    tokens: List[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(payload) and payload[i:i + 1].isspace():
            i += 1
        if i >= len(payload):
            raise FormatError("truncated netpbm header", field="path")
        if payload[i:i + 1] == b"#":
            while i < len(payload) and payload[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(payload) and not payload[i:i + 1].isspace():
            i += 1
        tokens.append(payload[start:i])
    return tokens, i + 1


def _decode_netpbm(payload: bytes, magic: bytes, channels: int) -> np.ndarray:
    tokens, offset = _header_tokens(payload, 4)
    if tokens[0] != magic:
        raise FormatError(f"expected {magic.decode()} file, got {tokens[0]!r}", field="path")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("non-numeric netpbm header", field="path")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", field="path")
    expected = w * h * channels
    body = payload[offset:offset + expected]
    if len(body) != expected:
        raise FormatError(f"truncated pixel data: {len(body)} of {expected} bytes", field="path")
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float32) / 255.0
    return pixels.reshape(h, w, channels) if channels > 1 else pixels.reshape(h, w)


def decode_ppm(payload: bytes) -> np.ndarray:
    return _decode_netpbm(payload, b"P6", 3)


def decode_pgm(payload: bytes) -> np.ndarray:
    return _decode_netpbm(payload, b"P5", 1)


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path: PathLike, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(values))


def read_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def save_dataset_ppm(dataset: Dataset, store: ArtifactStore, prefix: str = "") -> pd.DataFrame:
    """One PPM per image plus a labels.csv index (file, label)."""
    rows = []
    for i, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"images/{i:05d}.ppm"
        store.write_bytes(prefix + name, encode_ppm(image))
        rows.append({"file": name, "label": int(label)})
    index = pd.DataFrame(rows, columns=["file", "label"])
    store.write_frame(prefix + "labels.csv", index)
    return index


def load_dataset_ppm(directory: PathLike, split: str = "heldout", num_classes: Optional[int] = None) -> Dataset:
    root = Path(directory)
    index_path = root / "labels.csv"
    if not index_path.exists():
        raise FormatError(f"no labels.csv in {root}", field="path")
    index = pd.read_csv(index_path)
    if list(index.columns) != ["file", "label"]:
        raise FormatError(f"labels.csv header must be file,label, got {list(index.columns)}", field="path")
    if len(index) == 0:
        raise FormatError("labels.csv lists no images", field="path")
    images = np.stack([read_ppm(root / name) for name in index["file"]])
    labels = index["label"].to_numpy(dtype=np.int64)
    return Dataset(
        images=images,
        labels=labels,
        split=split,
        num_classes=num_classes if num_classes is not None else int(labels.max()) + 1,
    )
