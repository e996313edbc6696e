"""
Exact top-m cosine neighbor retrieval.
Similarities are computed in float32 over fixed blocks of query rows, so a
row's values do not depend on how blocks are spread over threads.
Ties are broken by the smaller term id.
"""
import io
import os
import time
import struct
import hashlib
import logging

import numpy as np

from .errors import FormatError, NeighborCountError, NonFiniteError, ZeroVectorError, \
    SizeMismatchError
from .shard_pool import run_shards


logger = logging.getLogger(__name__)


TABLE_MAGIC = b'TCNT'
FORMAT_VERSION = 1

BLOCK_ROWS = 128
SELECT_ROWS = 16


class NeighborTable:
    """
    Per-term top-m neighbor ids and cosine similarities, self excluded,
    each row sorted by similarity descending then id ascending.
    """
    def __init__(self, ids, sims):
        """
        Parameters
        ----------
        ids: numpy.ndarray
            n x m matrix of term ids.
        sims: numpy.ndarray
            n x m matrix of float32 similarities.
        """
        if ids.shape != sims.shape or ids.ndim != 2:
            raise SizeMismatchError('ids and sims must be matrices of one shape.')
        self.ids = np.asarray(ids, dtype=np.int64)
        self.sims = np.asarray(sims, dtype=np.float32)


    def __repr__(self):
        return '<%s n=%d m=%d>' % (self.__class__.__name__, self.n, self.m)


    def __eq__(self, other):
        return isinstance(other, NeighborTable) and \
            np.array_equal(self.ids, other.ids) and \
            np.array_equal(self.sims, other.sims)


    @property
    def n(self):
        return self.ids.shape[0]


    @property
    def m(self):
        return self.ids.shape[1]


    def row(self, term_id):
        return self.ids[term_id], self.sims[term_id]


    def check(self):
        """
        Raise FormatError if an invariant of the table does not hold.
        """
        n, m = self.ids.shape
        if m and np.any(self.ids == np.arange(n)[:, None]):
            raise FormatError('A row contains its own term id.')
        if np.any((self.ids < 0) | (self.ids >= n)):
            raise FormatError('A neighbor id is out of range.')
        if m > 1 and np.any(np.diff(self.sims, axis=1) > 0):
            raise FormatError('A row is not sorted by similarity.')
        if m > 1:
            ordered = np.sort(self.ids, axis=1)
            if np.any(ordered[:, 1:] == ordered[:, :-1]):
                raise FormatError('A row contains a repeated id.')
        if np.any(np.abs(self.sims) > 1 + 1e-6):
            raise FormatError('A similarity is outside [-1, 1].')
        return self


    def to_bytes(self):
        """
        Return the TCNT encoding: magic, version u32, n u64, m u32, then per row
        m little-endian u32 ids followed by m little-endian f32 sims.
        """
        n, m = self.ids.shape
        rows = np.empty((n, 2 * m), dtype='<u4')
        rows[:, :m] = self.ids.astype('<u4')
        rows[:, m:] = self.sims.astype('<f4').view('<u4')
        return TABLE_MAGIC + struct.pack('<IQI', FORMAT_VERSION, n, m) + rows.tobytes()


    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_table(path, table):
    tmp = '%s.tmp' % path
    with io.open(tmp, 'wb') as f:
        f.write(table.to_bytes())
    os.replace(tmp, path)


def load_table(path):
    with io.open(path, 'rb') as f:
        data = f.read()
    if data[:4] != TABLE_MAGIC:
        raise FormatError('%s: expected magic %r.' % (path, TABLE_MAGIC))
    if len(data) < 20:
        raise FormatError('%s: truncated header.' % path)
    version, n, m = struct.unpack('<IQI', data[4:20])
    if version != FORMAT_VERSION:
        raise FormatError('%s: unsupported version %d.' % (path, version))
    body = data[20:]
    if len(body) != n * m * 8:
        raise FormatError('%s: expected %d bytes of rows, got %d.' % (path, n * m * 8, len(body)))
    rows = np.frombuffer(body, dtype='<u4').reshape(n, 2 * m)
    ids = rows[:, :m].astype(np.int64)
    sims = rows[:, m:].copy().view('<f4').astype(np.float32)
    return NeighborTable(ids, sims)


def cosine(a, b):
    """
    Return the cosine similarity of two vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NonFiniteError('cosine of a non-finite vector.')
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVectorError('cosine of a zero vector.')
    return float(np.dot(a, b) / (na * nb))


def prepare(embeddings):
    """
    Return the float32 row-normalized copy of an embedding matrix used by
    every similarity computation of the package.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise SizeMismatchError('embeddings must be a matrix.')
    if not np.all(np.isfinite(e)):
        raise NonFiniteError('embeddings contain non-finite values.')
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError('embeddings contain a zero row.')
    return np.ascontiguousarray(e / norms[:, None], dtype=np.float32)


def similarity_block(prepared, start, stop, against=None):
    """
    Return the float32 similarities of rows start..stop of a prepared matrix
    against every row of `against` (the matrix itself by default).
    """
    against = prepared if against is None else against
    return prepared[start:stop] @ against.T


def _select_rows(sims, m):
    b, n = sims.shape
    rows = np.arange(b)
    if m < n:
        candidates = np.argpartition(sims, n - m, axis=1)[:, n - m:]
        kth = sims[rows[:, None], candidates].min(axis=1)
        crowded = np.flatnonzero(np.count_nonzero(sims >= kth[:, None], axis=1) > m)
        for r in crowded:
            above = np.flatnonzero(sims[r] > kth[r])
            tied = np.flatnonzero(sims[r] == kth[r])[:m - len(above)]
            candidates[r] = np.concatenate([above, tied])
    else:
        candidates = np.tile(np.arange(n), (b, 1))
    picked = sims[rows[:, None], candidates]
    order = np.lexsort((candidates, -picked), axis=1)
    return np.take_along_axis(candidates, order, axis=1), np.take_along_axis(picked, order, axis=1)


def select_top(sims, m, offset=None):
    """
    Return (ids, sims) of the m largest entries of every row, sorted by
    similarity descending then id ascending.
    Rows are selected SELECT_ROWS at a time.
    Parameters
    ----------
    sims: numpy.ndarray
        B x n block of similarities (modified in place when offset is given).
    m: int
        A number of entries to keep per row.
    offset: int
        If given, the global row id of the first row; entries (r, offset + r)
        are excluded as self matches.
    """
    b, n = sims.shape
    if offset is not None:
        rows = np.arange(b)
        sims[rows, offset + rows] = -np.inf
    keep = min(m, n)
    ids = np.empty((b, keep), dtype=np.int64)
    top = np.empty((b, keep), dtype=sims.dtype)
    for start in range(0, b, SELECT_ROWS):
        stop = min(start + SELECT_ROWS, b)
        ids[start:stop], top[start:stop] = _select_rows(sims[start:stop], m)
    return ids, top


def _check_m(n, m):
    if not 1 <= m <= n - 1:
        raise NeighborCountError('m must satisfy 1 <= m <= n - 1 (m=%d, n=%d).' % (m, n))


def top_m(embeddings, query_id, m):
    """
    Return (ids, sims) of the m terms most similar to query_id, self excluded.
    """
    prepared = prepare(embeddings)
    n = prepared.shape[0]
    _check_m(n, m)
    if not 0 <= query_id < n:
        raise NeighborCountError('query id %d out of range.' % query_id)
    # the block build_neighbor_table computes this row in, so values match bit for bit
    start = query_id - query_id % BLOCK_ROWS
    block = similarity_block(prepared, start, min(start + BLOCK_ROWS, n))
    row = block[query_id - start:query_id - start + 1]
    ids, sims = select_top(row, m, offset=query_id)
    return ids[0], sims[0]


def _block_starts(n, block_rows):
    return list(range(0, n, block_rows))


def build_neighbor_table(embeddings, m, threads=1, block_rows=BLOCK_ROWS):
    """
    Return the NeighborTable whose row i is top_m(embeddings, i, m).
    Parameters
    ----------
    embeddings: numpy.ndarray
        n x dim matrix.
    m: int
        A number of neighbors per term.
    threads: int
        A number of worker threads (0 = one per CPU).
    block_rows: int
        A number of query rows per similarity block.
    """
    started = time.time()
    prepared = prepare(embeddings)
    n = prepared.shape[0]
    if n < 2:
        raise NeighborCountError('A neighbor table needs at least 2 terms.')
    _check_m(n, m)
    ids = np.empty((n, m), dtype=np.int64)
    sims = np.empty((n, m), dtype=np.float32)

    def shard(start):
        stop = min(start + block_rows, n)
        block_ids, block_sims = select_top(similarity_block(prepared, start, stop), m, offset=start)
        ids[start:stop] = block_ids
        sims[start:stop] = block_sims

    run_shards(shard, _block_starts(n, block_rows), threads)
    logger.info('Built a neighbor table n=%d m=%d in %.2fs', n, m, time.time() - started)
    return NeighborTable(ids, sims)


def search(dictionary, queries, k, threads=1, block_rows=BLOCK_ROWS):
    """
    Return (ids, sims) of the k dictionary rows most similar to every query
    (no self exclusion).
    """
    prepared = prepare(dictionary)
    q = prepare(queries) if len(queries) else np.zeros((0, prepared.shape[1]), dtype=np.float32)
    if q.shape[1] != prepared.shape[1]:
        raise SizeMismatchError('queries and dictionary differ in dimension.')
    k = min(k, prepared.shape[0])
    ids = np.empty((q.shape[0], k), dtype=np.int64)
    sims = np.empty((q.shape[0], k), dtype=np.float32)

    def shard(start):
        stop = min(start + block_rows, q.shape[0])
        block_ids, block_sims = select_top(similarity_block(q, start, stop, prepared), k)
        ids[start:stop] = block_ids
        sims[start:stop] = block_sims

    run_shards(shard, _block_starts(q.shape[0], block_rows), threads)
    return ids, sims
