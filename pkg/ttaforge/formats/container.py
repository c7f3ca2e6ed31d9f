"""
Binary tensor container shared by detector weight files and prompt checkpoints.

Layout (little-endian)::

    b"TTAFORGE"  u16 version  u64 seed                      header, 18 bytes
    then per tensor, in order:
    u8 tag length, ASCII tag, u8 ndim, u32 x ndim dims, float32 data (row-major)
"""
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ttaforge.errors import ContainerError

MAGIC = b"TTAFORGE"
VERSION = 1
HEADER = struct.Struct("<8sHQ")


def dumps(sections: Dict[str, np.ndarray], seed: int) -> bytes:
    chunks = [HEADER.pack(MAGIC, VERSION, int(seed))]
    for tag, array in sections.items():
        encoded = tag.encode("ascii")
        array = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(struct.pack("<B", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


def loads(data: bytes) -> Tuple[int, "OrderedDict[str, np.ndarray]"]:
    if len(data) < HEADER.size:
        raise ContainerError("File is shorter than the container header")
    magic, version, seed = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"Bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"Unsupported container version {version}")

    sections = OrderedDict()
    offset = HEADER.size
    try:
        while offset < len(data):
            (taglen,) = struct.unpack_from("<B", data, offset)
            offset += 1
            tag = data[offset : offset + taglen].decode("ascii")
            offset += taglen
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = 4 * count
            if offset + nbytes > len(data):
                raise ContainerError(f"Section {tag!r} is truncated")
            sections[tag] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
            offset += nbytes
    except struct.error as ex:
        raise ContainerError(f"Truncated section header at byte {offset}") from ex
    return seed, sections


def write(path: Union[str, Path], sections: Dict[str, np.ndarray], seed: int):
    Path(path).write_bytes(dumps(sections, seed))


def read(path: Union[str, Path]) -> Tuple[int, "OrderedDict[str, np.ndarray]"]:
    return loads(Path(path).read_bytes())
