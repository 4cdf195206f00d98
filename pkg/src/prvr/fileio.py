"""Checksummed binary container shared by corpus, index and checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes, identifies the file kind
    version    u32
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON
    payload    raw little-endian array bytes, layout described by the header
    digest     32 bytes, SHA-256 of everything above

Writes go to a temporary file in the target directory followed by an atomic
rename.
"""
import hashlib
import json
import os
import struct
import tempfile

_PREFIX = struct.Struct("<8sIQ")
DIGEST_SIZE = 32


class CorruptFileError(ValueError):
    pass


class VersionMismatchError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    body = _PREFIX.pack(magic, version, len(hdr)) + hdr + payload
    return body + hashlib.sha256(body).digest()


def unpack(data: bytes, magic: bytes, version: int) -> tuple[dict, memoryview]:
    if len(data) < _PREFIX.size + DIGEST_SIZE:
        raise CorruptFileError("file too short")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    got_magic, got_version, hdr_len = _PREFIX.unpack_from(body)
    if got_magic != magic:
        raise CorruptFileError(f"bad magic {got_magic!r}, expected {magic!r}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError("checksum mismatch (truncated or corrupted file)")
    if got_version != version:
        raise VersionMismatchError(f"file version {got_version}, this build reads version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(bytes(body[start:start + hdr_len]))
    except ValueError as exc:
        raise CorruptFileError("unreadable header") from exc
    return header, memoryview(body)[start + hdr_len:]


def write(path, magic: bytes, version: int, header: dict, payload: bytes) -> int:
    data = pack(magic, version, header, payload)
    atomic_write(path, data)
    return len(data)


def read(path, magic: bytes, version: int) -> tuple[dict, memoryview]:
    with open(path, "rb") as fh:
        return unpack(fh.read(), magic, version)
