"""Little-endian binary codec used by every persisted xmodal file.

Each file starts with a 4-byte magic and a u32 version. ``Reader`` tracks the
byte offset so decoding failures surface as ``FormatError`` with a position.
"""
import hashlib
import os
import struct
from typing import Optional, Union

import numpy as np

from .errors import FormatError

PathLike = Union[str, os.PathLike]


class Writer:
    def __init__(self, magic: bytes, version: int):
        self._parts = [magic, struct.pack('<I', version)]

    def pack(self, fmt: str, *values):
        self._parts.append(struct.pack('<' + fmt, *values))

    def array(self, values: np.ndarray, dtype: str):
        self._parts.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def matrix(self, values: np.ndarray):
        """Write a 2-D float64 matrix prefixed by its u32 shape."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        self.pack('II', values.shape[0], values.shape[1])
        self.array(values, '<f8')

    def blob(self, data: bytes):
        self.pack('Q', len(data))
        self._parts.append(data)

    def getvalue(self) -> bytes:
        return b''.join(self._parts)


class Reader:
    def __init__(self, data: bytes, magic: bytes, versions=(1,), path: Optional[PathLike] = None):
        self.data = data
        self.offset = 0
        self.path = str(path) if path is not None else None
        found = self.take(len(magic))
        if found != magic:
            raise FormatError(f'bad magic {found!r}, expected {magic!r}', offset=0, path=self.path)
        self.version = self.unpack('I')[0]
        if self.version not in versions:
            raise FormatError(f'unsupported version {self.version}', offset=len(magic), path=self.path)

    def fail(self, message: str, offset: Optional[int] = None):
        raise FormatError(message, offset=self.offset if offset is None else offset, path=self.path)

    def take(self, count: int) -> bytes:
        if count < 0 or self.offset + count > len(self.data):
            self.fail(f'truncated: wanted {count} bytes, {len(self.data) - self.offset} left')
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        fmt = '<' + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).copy()

    def matrix(self) -> np.ndarray:
        rows, cols = self.unpack('II')
        return self.array('<f8', rows * cols).astype(np.float64).reshape(rows, cols)

    def blob(self) -> bytes:
        (length,) = self.unpack('Q')
        return self.take(length)

    def finish(self):
        if self.offset != len(self.data):
            self.fail(f'{len(self.data) - self.offset} trailing bytes')


def read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, 'rb') as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f'cannot read file: {exc}', path=str(path)) from exc


def write_bytes_atomic(path: PathLike, data: bytes):
    """Write through a temporary file and rename, so readers never see a partial file."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp_path = path + '.tmp'
    try:
        with open(tmp_path, 'wb') as fh:
            fh.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    return sha256_bytes(read_bytes(path))
