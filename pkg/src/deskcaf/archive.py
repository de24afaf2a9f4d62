"""CAF1 deterministic archive format.

Layout: magic ``CAF1``, entry count (u32 LE), entries sorted ascending by
raw path bytes, each entry being path length (u16 LE), UTF-8 path
('/' separated, no leading '/'), mode (u32 LE), size (u64 LE), then the
content bytes; finally a SHA-256 footer over everything before it. Same
tree in, same bytes out. Artifact ids are the SHA-256 of the uncompressed
CAF1 bytes; transport wrapping is plain gzip with a zeroed mtime so the
compressed bytes are deterministic too.
"""

from __future__ import annotations

import gzip
import hashlib
import struct

from .model import DeskcafError

MAGIC = b"CAF1"
_FOOTER_LEN = 32
_MAX_PATH = 0xFFFF


class ArchiveError(DeskcafError):
    pass


class DuplicatePath(ArchiveError):
    pass


class PathTooLong(ArchiveError):
    pass


class BadMagic(ArchiveError):
    pass


class TruncatedArchive(ArchiveError):
    pass


class ChecksumMismatch(ArchiveError):
    pass


class MalformedArchive(ArchiveError):
    """Structurally valid frame whose entries violate the canonical form."""


def _check_path(path: str) -> bytes:
    raw = path.encode("utf-8")
    if len(raw) > _MAX_PATH:
        raise PathTooLong(f"path of {len(raw)} bytes exceeds {_MAX_PATH}")
    if not raw or raw.startswith(b"/"):
        raise ArchiveError(f"invalid archive path {path!r}")
    return raw


def pack(tree) -> tuple[bytes, str]:
    """Serialize (path, mode, bytes) triples; returns (archive bytes, artifact id).

    Insertion order is irrelevant: entries are sorted by raw path bytes.
    """
    entries = []
    seen = set()
    for path, mode, content in tree:
        raw = _check_path(path)
        if raw in seen:
            raise DuplicatePath(path)
        seen.add(raw)
        entries.append((raw, int(mode), bytes(content)))
    entries.sort(key=lambda e: e[0])

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(entries))
    for raw, mode, content in entries:
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<IQ", mode & 0xFFFFFFFF, len(content))
        out += content
    out += hashlib.sha256(bytes(out)).digest()
    blob = bytes(out)
    return blob, hashlib.sha256(blob).hexdigest()


def unpack(blob: bytes) -> list[tuple[str, int, bytes]]:
    """Parse archive bytes back into sorted (path, mode, content) triples.

    Verifies the magic, the structural frame, the canonical entry order,
    and the footer digest.
    """
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a CAF1 archive")
    if len(blob) < len(MAGIC) + 4 + _FOOTER_LEN:
        raise TruncatedArchive(f"{len(blob)} bytes is below the minimum frame")
    body, footer = blob[:-_FOOTER_LEN], blob[-_FOOTER_LEN:]
    if hashlib.sha256(body).digest() != footer:
        raise ChecksumMismatch("footer digest does not match body")

    (count,) = struct.unpack_from("<I", body, len(MAGIC))
    pos = len(MAGIC) + 4
    entries = []
    prev_raw = None
    for _ in range(count):
        if pos + 2 > len(body):
            raise TruncatedArchive("entry header out of bounds")
        (path_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if pos + path_len + 12 > len(body):
            raise TruncatedArchive("entry out of bounds")
        raw = body[pos : pos + path_len]
        pos += path_len
        mode, size = struct.unpack_from("<IQ", body, pos)
        pos += 12
        if pos + size > len(body):
            raise TruncatedArchive("entry content out of bounds")
        content = body[pos : pos + size]
        pos += size
        if prev_raw is not None:
            if raw == prev_raw:
                raise DuplicatePath(raw.decode("utf-8", "replace"))
            if raw < prev_raw:
                raise MalformedArchive("entries not sorted by path")
        prev_raw = raw
        try:
            path = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedArchive(f"non-UTF-8 path: {exc}") from exc
        if not path or path.startswith("/"):
            raise MalformedArchive(f"invalid archive path {path!r}")
        entries.append((path, mode, content))
    if pos != len(body):
        raise TruncatedArchive(f"{len(body) - pos} trailing bytes after last entry")
    return entries


def artifact_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def wrap_gzip(blob: bytes) -> bytes:
    return gzip.compress(blob, mtime=0)


def unwrap_gzip(wrapped: bytes) -> bytes:
    try:
        return gzip.decompress(wrapped)
    except (OSError, EOFError) as exc:
        raise TruncatedArchive(f"bad gzip wrapping: {exc}") from exc
