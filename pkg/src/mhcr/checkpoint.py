"""Binary checkpoint format: a fixed header followed by named little-endian
f32 tensors. Layout:

    magic "MHCRCKPT" (8s) | version u32 | d u32 | num_users u64 |
    num_items u64 | k_hyper u32 | num_modalities u32
    per modality: tag u8 | d_m u32
    per tensor:  name_len u16 | name utf-8 | ndim u8 | dims u64... | f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import MODALITIES
from .errors import DataError
from .hypergraph import HyperedgeParameters
from .training import ModelParameters

_MAGIC = b"MHCRCKPT"
_VERSION = 1
_HEADER = struct.Struct("<8sIIQQII")
_MODALITY = struct.Struct("<BI")


def save_checkpoint(params: ModelParameters, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                params.d,
                params.num_users,
                params.num_items,
                params.hyper.k_hyper,
                len(params.modality_tags),
            )
        )
        for tag in params.modality_tags:
            fh.write(_MODALITY.pack(MODALITIES.index(tag), params.modality_dims[tag]))
        for name, tensor in params.tensors().items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}Q", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, fmt: struct.Struct | str):
        fmt = struct.Struct(fmt) if isinstance(fmt, str) else fmt
        if self.offset + fmt.size > len(self.raw):
            raise DataError(f"{self.path}: truncated checkpoint")
        values = fmt.unpack_from(self.raw, self.offset)
        self.offset += fmt.size
        return values

    def take_bytes(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise DataError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def exhausted(self) -> bool:
        return self.offset >= len(self.raw)


def load_checkpoint(path: str | Path) -> ModelParameters:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic, version, d, num_users, num_items, k_hyper, n_mod = reader.take(_HEADER)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {magic!r}")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")

    modality_dims: dict[str, int] = {}
    tags: list[str] = []
    for _ in range(n_mod):
        tag_id, d_m = reader.take(_MODALITY)
        if tag_id >= len(MODALITIES):
            raise DataError(f"{path}: unknown modality tag {tag_id}")
        tag = MODALITIES[tag_id]
        tags.append(tag)
        modality_dims[tag] = d_m

    tensors: dict[str, np.ndarray] = {}
    while not reader.exhausted():
        (name_len,) = reader.take("<H")
        name = reader.take_bytes(name_len).decode("utf-8")
        (ndim,) = reader.take("<B")
        dims = reader.take(f"<{ndim}Q")
        data = reader.take_bytes(int(np.prod(dims)) * 4)
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float64)

    expected: dict[str, tuple[int, ...]] = {"E0": (num_users + num_items, d)}
    for tag in tags:
        expected[f"W_{tag}"] = (modality_dims[tag], d)
        expected[f"V_{tag}"] = (k_hyper, modality_dims[tag])
    if set(tensors) != set(expected):
        raise DataError(
            f"{path}: tensor set mismatch; found {sorted(tensors)}, "
            f"expected {sorted(expected)}"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DataError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")

    hyper = HyperedgeParameters(
        v={tag: ad.Tensor(tensors[f"V_{tag}"], requires_grad=True) for tag in tags},
        w={tag: ad.Tensor(tensors[f"W_{tag}"], requires_grad=True) for tag in tags},
        k_hyper=k_hyper,
    )
    return ModelParameters(
        num_users=num_users,
        num_items=num_items,
        d=d,
        e0=ad.Tensor(tensors["E0"], requires_grad=True),
        hyper=hyper,
        modality_tags=tuple(tags),
        modality_dims=modality_dims,
    )
