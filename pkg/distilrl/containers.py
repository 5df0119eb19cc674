"""
Tensor Containers
=================

A small versioned binary format for named float tensors (teacher weights,
cached teacher logits). Layout, all integers little-endian u32:

    b"DRLT" | version | tensor count
    then for each tensor:
        name length | UTF-8 name | rank | dims... | float32 payload (LE)

Tensors are stored at float32 precision and come back as float32 arrays.
"""

import struct

import numpy as np


MAGIC = b"DRLT"
CONTAINER_VERSION = 1


class ContainerFormatError(ValueError):
    """A tensor container is truncated or was not written by this module."""


def save_tensors(path, tensors):
    """
    Write `tensors` (dict of name to array) to `path`, in the dict's order.
    """
    chunks = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise ContainerFormatError(
                f"{self.path}: truncated {what} at offset {self.offset}"
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what, count=1):
        values = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return values if count > 1 else values[0]


def load_tensors(path):
    """
    Read a container written by `save_tensors`. Returns a dict of name to
    float32 array, in file order.

    Raises `ContainerFormatError` for a bad magic, an unsupported version or
    a truncated file.
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {magic!r} at offset 0")
    version = reader.u32("version")
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"{path}: unsupported container version "
                                   f"{version}")
    tensors = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        rank = reader.u32("rank")
        shape = tuple(int(d) for d in np.atleast_1d(reader.u32("dims", rank))
                      ) if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(4 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(
            np.float32).reshape(shape)
    return tensors
