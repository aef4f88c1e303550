"""Binary snapshot of a :class:`CompressedKvCache` for prefill-to-decode handoff.

Layout (little-endian)::

    b"SSKV"  u16 version (=1)
    u16 n_layers  u16 n_kv_heads  u16 head_dim
    u32 l_sink  u32 l_recent  u32 k_top  u32 seq_len  u32 valid_topk
    f32 keys[n_layers][n_kv_heads][l_snapstream][head_dim]
    f32 values[...same shape...]
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import SnapStreamConfig
from .errors import SnapshotFormatError
from .kvcache import PAD, UNKNOWN, CompressedKvCache, ring_slot

MAGIC = b"SSKV"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHIIIII")


def dumps(cache: CompressedKvCache) -> bytes:
    cfg = cache.cfg
    if len(set(int(x) for x in cache.lengths)) != 1:
        raise SnapshotFormatError("cannot snapshot a cache in the middle of a decode step")
    header = _HEADER.pack(MAGIC, VERSION, cfg.n_layers, cfg.n_kv_heads, cfg.head_dim,
                          cfg.l_sink, cfg.l_recent, cfg.k_top, cache.seq_len,
                          cache.valid_topk)
    return (header + cache.keys.astype("<f4").tobytes()
            + cache.values.astype("<f4").tobytes())


def loads(data: bytes, cfg: SnapStreamConfig | None = None) -> CompressedKvCache:
    """Parse a snapshot.

    Without ``cfg`` the geometry comes from the header alone; ``l_max`` then
    defaults to the larger of ``seq_len`` and the cache capacity. With ``cfg``
    the header must agree with it.
    """
    if len(data) < _HEADER.size:
        raise SnapshotFormatError("snapshot is shorter than its header")
    magic, version, n_layers, n_kv, d, l_sink, l_recent, k_top, seq_len, valid_topk = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    cap = l_sink + l_recent + k_top
    if cfg is None:
        cfg = SnapStreamConfig(l_max=max(seq_len, cap), l_sink=l_sink, l_recent=l_recent,
                               k_top=k_top, n_layers=n_layers, n_q_heads=n_kv,
                               n_kv_heads=n_kv, head_dim=d)
    elif (cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, cfg.l_sink, cfg.l_recent, cfg.k_top) != \
            (n_layers, n_kv, d, l_sink, l_recent, k_top):
        raise SnapshotFormatError("snapshot geometry does not match the configuration")
    if valid_topk > k_top:
        raise SnapshotFormatError("valid_topk exceeds k_top")
    count = n_layers * n_kv * cap * d
    expected = _HEADER.size + 2 * 4 * count
    if len(data) != expected:
        raise SnapshotFormatError(f"expected {expected} bytes, got {len(data)}")
    shape = (n_layers, n_kv, cap, d)
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    keys = body[:count].reshape(shape).astype(np.float32)
    values = body[count:].reshape(shape).astype(np.float32)

    cache = CompressedKvCache.empty(cfg)
    cache.keys[...] = keys
    cache.values[...] = values
    cache.valid_topk = valid_topk
    cache.lengths[:] = seq_len
    _annotate(cache)
    return cache


def _annotate(cache: CompressedKvCache) -> None:
    # sink/ring occupants follow from seq_len; top-K sources are not stored
    cfg = cache.cfg
    n = cache.seq_len
    ann = cache.slot_tokens
    ann[...] = PAD
    for t in range(min(n, cfg.l_sink)):
        ann[:, :, t] = t
    for t in range(max(cfg.l_sink, n - cfg.l_recent), n):
        ann[:, :, ring_slot(t, cfg)] = t
    ann[:, :, cfg.l_sr:cfg.l_sr + cache.valid_topk] = UNKNOWN


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(cache: CompressedKvCache, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, dumps(cache))


def load(path: str | os.PathLike, cfg: SnapStreamConfig | None = None) -> CompressedKvCache:
    return loads(Path(path).read_bytes(), cfg)
