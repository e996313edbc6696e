"""
Hashed character n-gram term encoder.

A surface is padded as "⟨" + surface + "⟩", every character n-gram
of length ngram_min..ngram_max is hashed with keyed BLAKE2b (8-byte digest,
the little-endian 64-bit hash_seed as key, little-endian digest as integer)
into one of bucket_count rows of a trainable table. The embedding is the
L2-normalized mean of those rows.
"""
import io
import os
import struct
import hashlib
from collections import namedtuple

import numpy as np

from .errors import EmptySurfaceError, FormatError, ValidationError, NonFiniteError
from .shard_pool import run_shards


PAD_LEFT = '⟨'
PAD_RIGHT = '⟩'

DEFAULT_BUCKET_COUNT = 2 ** 18
DEFAULT_DIM = 128
DEFAULT_NGRAM_MIN = 3
DEFAULT_NGRAM_MAX = 5
DEFAULT_MAX_CHARS = 64

# pre-normalization norms below the value map to the fallback vector
ZERO_NORM = 1e-12

EMBEDDINGS_MAGIC = b'TCEM'
CHECKPOINT_MAGIC = b'TCPQ'
FORMAT_VERSION = 1

_ENCODE_CHUNK = 2048


SparseRows = namedtuple('SparseRows', ['rows', 'values'])
SparseRows.__doc__ = """
A sparse gradient of the table: sorted unique row indices and one value row per index.
"""


def hash_ngram(ngram, hash_seed):
    """
    Return the 64-bit keyed hash of an n-gram.
    """
    key = struct.pack('<Q', hash_seed & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(ngram.encode('utf-8'), digest_size=8, key=key).digest()
    return struct.unpack('<Q', digest)[0]


def char_ngrams(surface, ngram_min, ngram_max):
    """
    Return all character n-grams of the padded surface, shortest first.
    If the padded surface is shorter than ngram_min the padded surface
    itself is the only n-gram.
    """
    padded = PAD_LEFT + surface + PAD_RIGHT
    ngrams = []
    for k in range(ngram_min, ngram_max + 1):
        for i in range(len(padded) - k + 1):
            ngrams.append(padded[i:i + k])
    if not ngrams:
        ngrams.append(padded)
    return ngrams


def _segment_sum(index, values):
    """
    Sum value rows sharing an index. Return SparseRows with sorted unique rows.
    """
    if len(index) == 0:
        dim = values.shape[1] if values.ndim == 2 else 0
        return SparseRows(np.empty(0, dtype=np.int64), np.zeros((0, dim), dtype=values.dtype))
    order = np.argsort(index, kind='stable')
    sorted_index = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_index[1:] != sorted_index[:-1]])
    sums = np.add.reduceat(values[order], starts, axis=0)
    return SparseRows(sorted_index[starts], sums)


def merge_sparse(parts):
    """
    Sum a list of SparseRows into one.
    """
    parts = [p for p in parts if len(p.rows)]
    if not parts:
        return SparseRows(np.empty(0, dtype=np.int64), np.zeros((0, 0)))
    return _segment_sum(np.concatenate([p.rows for p in parts]),
                        np.concatenate([p.values for p in parts]))


class EncoderParams:
    """
    Parameters of the hashed n-gram encoder: the trainable table and
    the hyperparameters of featurization. The encoder functions never
    mutate the table; the trainer owns writes to it.
    """
    def __init__(self,
                 table,
                 ngram_min=DEFAULT_NGRAM_MIN,
                 ngram_max=DEFAULT_NGRAM_MAX,
                 hash_seed=0,
                 max_chars=DEFAULT_MAX_CHARS):
        """
        Parameters
        ----------
        table: numpy.ndarray
            bucket_count x dim matrix of real numbers.
        ngram_min: int
            The shortest n-gram length.
        ngram_max: int
            The longest n-gram length.
        hash_seed: int
            A 64-bit seed of the n-gram hash.
        max_chars: int
            Surfaces are truncated to this number of characters.
        """
        self.table = table
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self.hash_seed = hash_seed
        self.max_chars = max_chars
        self._features = {}
        self.validate()


    def __repr__(self):
        return '<%s buckets=%d dim=%d ngrams=%d..%d seed=%d>' % (self.__class__.__name__,
                                                                  self.bucket_count,
                                                                  self.dim,
                                                                  self.ngram_min,
                                                                  self.ngram_max,
                                                                  self.hash_seed)


    @property
    def bucket_count(self):
        return self.table.shape[0]


    @property
    def dim(self):
        return self.table.shape[1]


    @property
    def hyperparameters(self):
        return {'bucket_count': self.bucket_count,
                'dim': self.dim,
                'ngram_min': self.ngram_min,
                'ngram_max': self.ngram_max,
                'hash_seed': self.hash_seed,
                'max_chars': self.max_chars}


    def validate(self):
        if self.table.ndim != 2:
            raise ValidationError('The table must be a matrix.')
        if self.bucket_count < 1:
            raise ValidationError('bucket_count must be >= 1.')
        if self.dim < 2:
            raise ValidationError('dim must be >= 2 (got %d).' % self.dim)
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise ValidationError('ngram range must satisfy 1 <= ngram_min <= ngram_max.')
        if self.max_chars < 1:
            raise ValidationError('max_chars must be >= 1.')
        if not np.all(np.isfinite(self.table)):
            raise NonFiniteError('The table contains non-finite values.')
        return self


    def copy(self):
        return EncoderParams(self.table.copy(), self.ngram_min, self.ngram_max,
                             self.hash_seed, self.max_chars)


    def featurize(self, surface):
        """
        Return the multiset of bucket indices of a surface (int64 array,
        one entry per n-gram occurrence).
        """
        features = self._features.get(surface)
        if features is None:
            if not surface:
                raise EmptySurfaceError('Can not featurize an empty surface.')
            ngrams = char_ngrams(surface[:self.max_chars], self.ngram_min, self.ngram_max)
            features = np.array([hash_ngram(g, self.hash_seed) % self.bucket_count for g in ngrams],
                                dtype=np.int64)
            self._features[surface] = features
        return features


    def _featurize_all(self, surfaces):
        features = []
        for index, surface in enumerate(surfaces):
            try:
                features.append(self.featurize(surface))
            except EmptySurfaceError as e:
                raise EmptySurfaceError(e._msg, index)
        return features


    def _pool(self, features):
        """
        Return (z, counts, flat index, offsets) for a list of feature arrays:
        z holds the mean table row of every surface.
        """
        counts = np.array([len(f) for f in features], dtype=np.int64)
        flat = np.concatenate(features)
        offsets = np.r_[0, np.cumsum(counts)[:-1]]
        sums = np.add.reduceat(self.table[flat], offsets, axis=0)
        z = sums / counts[:, None].astype(self.table.dtype)
        return z, counts, flat, offsets


    def _encode_features(self, features):
        if not features:
            return np.zeros((0, self.dim), dtype=self.table.dtype)
        z = self._pool(features)[0]
        norms = np.sqrt((z * z).sum(axis=1))
        degenerate = norms < ZERO_NORM
        e = z / np.where(degenerate, 1.0, norms)[:, None]
        if degenerate.any():
            e[degenerate] = 0.0
            e[degenerate, 0] = 1.0
        return e


    def encode(self, surface):
        """
        Return the unit-norm embedding of a surface.
        """
        return self._encode_features([self.featurize(surface)])[0]


    def encode_batch(self, surfaces, threads=1):
        """
        Return the count x dim matrix of embeddings; row i equals encode(surfaces[i]).
        Parameters
        ----------
        surfaces: list of str
            Surfaces to encode.
        threads: int
            A number of worker threads (0 = one per CPU).
        """
        features = self._featurize_all(surfaces)
        if len(features) <= _ENCODE_CHUNK:
            return self._encode_features(features)
        chunks = [features[i:i + _ENCODE_CHUNK] for i in range(0, len(features), _ENCODE_CHUNK)]
        return np.concatenate(run_shards(self._encode_features, chunks, threads))


    def encode_grad(self, surface, upstream):
        """
        Return d(upstream . e)/d(table) as SparseRows over the buckets of the surface.
        The fallback vector has a zero gradient.
        """
        return self.encode_batch_grad([surface], np.asarray(upstream)[None, :])


    def encode_batch_grad(self, surfaces, upstream):
        """
        Return the sum over i of d(upstream[i] . e_i)/d(table) as SparseRows.
        Parameters
        ----------
        surfaces: list of str
            Surfaces of the batch.
        upstream: numpy.ndarray
            count x dim matrix of gradients with respect to the embeddings.
        """
        features = self._featurize_all(surfaces)
        upstream = np.asarray(upstream, dtype=self.table.dtype)
        if not features:
            return SparseRows(np.empty(0, dtype=np.int64), np.zeros((0, self.dim), dtype=self.table.dtype))
        if upstream.shape != (len(features), self.dim):
            raise ValidationError('upstream must be %d x %d.' % (len(features), self.dim))
        z, counts, flat, _ = self._pool(features)
        norms = np.sqrt((z * z).sum(axis=1))
        degenerate = norms < ZERO_NORM
        safe = np.where(degenerate, 1.0, norms)
        e = z / safe[:, None]
        # (I - e e^T) u / |z|
        grad_z = (upstream - e * (e * upstream).sum(axis=1)[:, None]) / safe[:, None]
        grad_z[degenerate] = 0.0
        per_ngram = np.repeat(grad_z / counts[:, None].astype(self.table.dtype), counts, axis=0)
        return _segment_sum(flat, per_ngram)


def is_power_of_two(value):
    return isinstance(value, (int, np.integer)) and value > 0 and not value & (value - 1)


def init_params(bucket_count=DEFAULT_BUCKET_COUNT,
                dim=DEFAULT_DIM,
                ngram_min=DEFAULT_NGRAM_MIN,
                ngram_max=DEFAULT_NGRAM_MAX,
                hash_seed=0,
                max_chars=DEFAULT_MAX_CHARS,
                seed=0,
                dtype=np.float32):
    """
    Return EncoderParams with table entries drawn i.i.d. from U[-0.5/dim, 0.5/dim].
    bucket_count must be a power of two.
    """
    if not is_power_of_two(bucket_count):
        raise ValidationError('bucket_count must be a power of two, got %r.' % (bucket_count,))
    rng = np.random.default_rng(seed)
    bound = 0.5 / dim
    table = rng.uniform(-bound, bound, size=(bucket_count, dim)).astype(dtype)
    return EncoderParams(table, ngram_min, ngram_max, hash_seed, max_chars)


def _atomic_write(path, payload):
    tmp = '%s.tmp' % path
    with io.open(tmp, 'wb') as f:
        f.write(payload)
    os.replace(tmp, path)


def _read_exact(f, size, what):
    data = f.read(size)
    if len(data) != size:
        raise FormatError('Truncated file while reading %s.' % what)
    return data


def _check_magic(f, magic, path):
    got = f.read(4)
    if got != magic:
        raise FormatError('%s: expected magic %r, got %r.' % (path, magic, got))
    version = struct.unpack('<I', _read_exact(f, 4, 'version'))[0]
    if version != FORMAT_VERSION:
        raise FormatError('%s: unsupported version %d.' % (path, version))


def _read_f32_matrix(f, rows, cols, what):
    data = _read_exact(f, rows * cols * 4, what)
    return np.frombuffer(data, dtype='<f4').reshape(rows, cols).copy()


def embeddings_bytes(embeddings):
    """
    Return the TCEM encoding of an embedding matrix.
    """
    embeddings = np.asarray(embeddings)
    n, dim = embeddings.shape
    header = EMBEDDINGS_MAGIC + struct.pack('<IQI', FORMAT_VERSION, n, dim)
    return header + np.ascontiguousarray(embeddings, dtype='<f4').tobytes()


def save_embeddings(path, embeddings):
    """
    Write an embedding matrix: magic "TCEM", version u32, n u64, dim u32,
    then row-major little-endian f32.
    """
    _atomic_write(path, embeddings_bytes(embeddings))


def load_embeddings(path):
    with io.open(path, 'rb') as f:
        _check_magic(f, EMBEDDINGS_MAGIC, path)
        n, dim = struct.unpack('<QI', _read_exact(f, 12, 'header'))
        embeddings = _read_f32_matrix(f, n, dim, 'embeddings')
        if f.read(1):
            raise FormatError('%s: trailing bytes after the embeddings.' % path)
    return embeddings


_CHECKPOINT_HEADER = '<IQIIIQII'


def checkpoint_bytes(params, step=None, moments=None):
    """
    Return the TCPQ encoding of EncoderParams. When moments is given the
    optimizer state (step, first and second moments) is appended.
    """
    has_state = 1 if moments is not None else 0
    header = CHECKPOINT_MAGIC + struct.pack(_CHECKPOINT_HEADER,
                                            FORMAT_VERSION,
                                            params.bucket_count,
                                            params.dim,
                                            params.ngram_min,
                                            params.ngram_max,
                                            params.hash_seed & 0xFFFFFFFFFFFFFFFF,
                                            params.max_chars,
                                            has_state)
    chunks = [header, np.ascontiguousarray(params.table, dtype='<f4').tobytes()]
    if has_state:
        first, second = moments
        chunks.append(struct.pack('<Q', step or 0))
        chunks.append(np.ascontiguousarray(first, dtype='<f4').tobytes())
        chunks.append(np.ascontiguousarray(second, dtype='<f4').tobytes())
    return b''.join(chunks)


def save_checkpoint(path, params, step=None, moments=None):
    _atomic_write(path, checkpoint_bytes(params, step, moments))


def load_checkpoint(path, dtype=np.float32):
    """
    Read a checkpoint. Return (params, state) where state is None or
    (step, first moments, second moments).
    """
    with io.open(path, 'rb') as f:
        _check_magic(f, CHECKPOINT_MAGIC, path)
        size = struct.calcsize(_CHECKPOINT_HEADER) - 4
        bucket_count, dim, ngram_min, ngram_max, hash_seed, max_chars, has_state = \
            struct.unpack('<' + _CHECKPOINT_HEADER[2:], _read_exact(f, size, 'header'))
        table = _read_f32_matrix(f, bucket_count, dim, 'table').astype(dtype)
        state = None
        if has_state:
            step = struct.unpack('<Q', _read_exact(f, 8, 'step'))[0]
            first = _read_f32_matrix(f, bucket_count, dim, 'first moments').astype(dtype)
            second = _read_f32_matrix(f, bucket_count, dim, 'second moments').astype(dtype)
            state = (step, first, second)
        if f.read(1):
            raise FormatError('%s: trailing bytes after the checkpoint.' % path)
    return EncoderParams(table, ngram_min, ngram_max, hash_seed, max_chars), state
