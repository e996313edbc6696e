"""
Pairwise clustering evaluation over all n(n-1)/2 term pairs without
enumerating them.

A pair (i, j), i < j, is predicted synonymous at threshold theta iff j is in
row i of the neighbor table with similarity > theta, or i is in row j with
similarity > theta. TP and FP come from one pass over the stored pairs,
FN from one pass over the internal pairs of every ground truth cluster,
TN = C(n, 2) - TP - FP - FN.
"""
import io
import os
import csv
import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from .errors import SizeMismatchError, GuardError, ValidationError
from .simindex import prepare, similarity_block, search, BLOCK_ROWS
from .shard_pool import run_shards


logger = logging.getLogger(__name__)


DEFAULT_GRID = tuple(round(0.50 + 0.01 * i, 2) for i in range(50))

# warn when the largest cluster contributes more internal pairs than this
CLUSTER_PAIR_BUDGET = 10 ** 7

BRUTE_FORCE_MAX_N = 5000


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class EvalReport:
    """
    Pair counts and scores at one threshold.
    """
    theta: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


    @classmethod
    def from_counts(cls, theta, tp, fp, fn, tn):
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        return cls(float(theta), int(tp), int(fp), int(fn), int(tn), precision, recall, f1)


    def to_dict(self):
        return asdict(self)


    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def pair_count(n):
    return n * (n - 1) // 2


def _above(sims, theta):
    """
    The prediction rule: stored similarity strictly greater than theta.
    """
    return np.asarray(sims, dtype=np.float64) > theta


class PredictedPairSet:
    """
    Unordered predicted pairs (i < j), each stored once as the key i * n + j.
    """
    def __init__(self, keys, n):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.n = n


    def __len__(self):
        return len(self.keys)


    def __contains__(self, pair):
        i, j = pair
        if i == j:
            return False
        lo, hi = min(i, j), max(i, j)
        pos = np.searchsorted(self.keys, lo * self.n + hi)
        return bool(pos < len(self.keys) and self.keys[pos] == lo * self.n + hi)


    def __iter__(self):
        lo, hi = self.pairs()
        return iter(zip(lo.tolist(), hi.tolist()))


    def pairs(self):
        """
        Return (lo, hi) arrays.
        """
        return self.keys // self.n, self.keys % self.n


class StoredPairs:
    """
    Canonical pairs present in a neighbor table (in either direction) with the
    larger of their stored similarities, sorted by key.
    """
    def __init__(self, table):
        n, m = table.ids.shape
        rows = np.repeat(np.arange(n, dtype=np.int64), m)
        cols = table.ids.ravel()
        sims = table.sims.ravel().astype(np.float64)
        keys = np.minimum(rows, cols) * n + np.maximum(rows, cols)
        order = np.lexsort((sims, keys))
        keys = keys[order]
        sims = sims[order]
        last = np.r_[keys[1:] != keys[:-1], True] if len(keys) else np.zeros(0, dtype=bool)
        self.n = n
        self.keys = keys[last]
        self.best = sims[last]


    def lookup(self, keys):
        """
        Return the best stored similarity of every key (-inf when not stored).
        """
        keys = np.asarray(keys, dtype=np.int64)
        best = np.full(len(keys), -np.inf)
        if len(self.keys) == 0 or len(keys) == 0:
            return best
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        found = self.keys[pos] == keys
        best[found] = self.best[pos[found]]
        return best


def predict_pairs(table, theta):
    """
    Return the PredictedPairSet of a neighbor table at theta.
    """
    stored = StoredPairs(table)
    return PredictedPairSet(stored.keys[_above(stored.best, theta)], stored.n)


def _count_above(values, thetas, threads=1, shards=8):
    """
    Return, for every theta, the number of values strictly greater than theta.
    Counted per shard and summed.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    bounds = np.linspace(0, len(values), shards + 1).astype(np.int64)

    def shard(i):
        part = np.sort(values[bounds[i]:bounds[i + 1]])
        return len(part) - np.searchsorted(part, thetas, side='right')

    return np.sum(run_shards(shard, range(shards), threads), axis=0)


def _check_sizes(table, clusters):
    if table.n != clusters.n:
        raise SizeMismatchError('The neighbor table has %d terms, the clusters %d.'
                                % (table.n, clusters.n))


def _guard_clusters(clusters, budget):
    largest = int(clusters.sizes.max()) if len(clusters) else 0
    if largest * largest > budget:
        logger.warning('The largest cluster has %d terms; the cluster pass enumerates %d pairs for it.',
                       largest, pair_count(largest))


def _reports(table, clusters, thetas, threads=1, budget=CLUSTER_PAIR_BUDGET):
    _check_sizes(table, clusters)
    _guard_clusters(clusters, budget)
    n = table.n
    labels = clusters.labels
    stored = StoredPairs(table)
    lo, hi = stored.keys // n, stored.keys % n
    same = labels[lo] == labels[hi]
    # pass over the table: predicted pairs, split by ground truth
    tp = _count_above(stored.best[same], thetas, threads)
    predicted = _count_above(stored.best, thetas, threads)
    # pass over the clusters: ground truth pairs not predicted
    gt_lo, gt_hi = clusters.internal_pairs()
    gt_best = stored.lookup(gt_lo * n + gt_hi)
    fn = len(gt_best) - _count_above(gt_best, thetas, threads)
    total = pair_count(n)
    reports = []
    for theta, tp_, pred_, fn_ in zip(thetas, tp, predicted, fn):
        fp_ = pred_ - tp_
        reports.append(EvalReport.from_counts(theta, tp_, fp_, fn_, total - tp_ - fp_ - fn_))
    return reports


def evaluate(table, clusters, theta, threads=1, budget=CLUSTER_PAIR_BUDGET):
    """
    Return the EvalReport of a neighbor table against ground truth clusters.
    Runs in O(n m log(n m) + sum |C_i|^2).
    Parameters
    ----------
    table: NeighborTable
        Truncated neighbors of every term.
    clusters: ClusterMap
        Ground truth clusters over the same terms.
    theta: float
        A similarity threshold (strict).
    threads: int
        A number of worker threads for the counting passes.
    budget: int
        A warning is logged when the largest cluster size squared exceeds the value.
    """
    return _reports(table, clusters, [theta], threads, budget)[0]


def sweep(table, clusters, theta_grid=DEFAULT_GRID, threads=1, budget=CLUSTER_PAIR_BUDGET):
    """
    Return (reports, best_theta) over an ascending grid; best_theta maximizes F1
    with ties going to the larger theta.
    """
    grid = [float(t) for t in theta_grid]
    if not grid:
        raise ValidationError('The threshold grid is empty.')
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError('The threshold grid must be sorted ascending.')
    reports = _reports(table, clusters, grid, threads, budget)
    best = reports[0]
    for report in reports[1:]:
        if report.f1 >= best.f1:
            best = report
    return reports, best.theta


def brute_force_table(embeddings, m):
    """
    Return (ids, sims) of the top-m rows computed by sorting the full
    similarity matrix (similarity descending, id ascending).
    """
    prepared = prepare(embeddings)
    n = prepared.shape[0]
    full = np.concatenate([similarity_block(prepared, s, min(s + BLOCK_ROWS, n))
                           for s in range(0, n, BLOCK_ROWS)])
    np.fill_diagonal(full, -np.inf)
    ids = np.arange(n)
    top_ids = np.empty((n, m), dtype=np.int64)
    top_sims = np.empty((n, m), dtype=np.float32)
    for i in range(n):
        order = np.lexsort((ids, -full[i]))[:m]
        top_ids[i] = order
        top_sims[i] = full[i, order]
    return top_ids, top_sims


def brute_force_sweep(embeddings, clusters, thetas, m, max_n=BRUTE_FORCE_MAX_N):
    """
    Return the EvalReports, one per theta, obtained by enumerating every pair.
    Used as the reference for evaluate() and sweep().
    """
    n = len(embeddings)
    if n > max_n:
        raise GuardError('brute force evaluation is limited to %d terms (got %d).' % (max_n, n))
    if clusters.n != n:
        raise SizeMismatchError('%d embeddings but %d clustered terms.' % (n, clusters.n))
    top_ids, top_sims = brute_force_table(embeddings, m)
    stored = np.full((n, n), -np.inf)
    stored[np.repeat(np.arange(n), m), top_ids.ravel()] = top_sims.ravel()
    upper = np.triu_indices(n, k=1)
    # a pair is predicted when either direction is stored above theta
    best = np.maximum(stored, stored.T)[upper]
    labels = clusters.labels
    same = labels[upper[0]] == labels[upper[1]]
    reports = []
    for theta in thetas:
        predicted = _above(best, theta)
        tp = int(np.count_nonzero(predicted & same))
        fp = int(np.count_nonzero(predicted & ~same))
        fn = int(np.count_nonzero(~predicted & same))
        tn = int(np.count_nonzero(~predicted & ~same))
        reports.append(EvalReport.from_counts(theta, tp, fp, fn, tn))
    return reports


def brute_force_evaluate(embeddings, clusters, theta, m, max_n=BRUTE_FORCE_MAX_N):
    """
    Return the EvalReport obtained by enumerating every pair.
    """
    return brute_force_sweep(embeddings, clusters, [theta], m, max_n)[0]


class UnionFind:
    """
    Disjoint sets over 0..n-1; the root of a set is its smallest member.
    """
    def __init__(self, n):
        self.parent = list(range(n))


    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root


    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb


def connected_components(pairs, n):
    """
    Return an int64 array mapping every term id to its predicted cluster id,
    the smallest term id of its connected component.
    """
    uf = UnionFind(n)
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise SizeMismatchError('Pair (%d, %d) out of range for n=%d.' % (i, j, n))
        uf.union(i, j)
    return np.array([uf.find(x) for x in range(n)], dtype=np.int64)


def linking_accuracy(dictionary_embeddings, dictionary_concepts, queries, ks=(1, 5), threads=1):
    """
    Return {k: Acc@k}: the fraction of queries whose top-k most similar
    dictionary terms include a term of the gold concept.
    Parameters
    ----------
    dictionary_embeddings: numpy.ndarray
        N x dim matrix of dictionary term embeddings.
    dictionary_concepts: list of str
        Concept id of every dictionary term.
    queries: list
        (embedding, gold concept id) pairs.
    ks: list of int
        Cut-offs, sorted ascending.
    """
    ks = [int(k) for k in ks]
    if not ks or any(k < 1 for k in ks) or any(b < a for a, b in zip(ks, ks[1:])):
        raise ValidationError('ks must be non-empty, positive and sorted ascending.')
    if len(dictionary_embeddings) == 0:
        raise ValidationError('The dictionary is empty.')
    if len(dictionary_concepts) != len(dictionary_embeddings):
        raise SizeMismatchError('Dictionary embeddings and concepts differ in length.')
    if not queries:
        return {k: 0.0 for k in ks}
    known = set(dictionary_concepts)
    concepts = np.asarray(dictionary_concepts, dtype=object)
    query_matrix = np.stack([np.asarray(e) for e, _ in queries])
    ids, _ = search(dictionary_embeddings, query_matrix, ks[-1], threads)
    first_hit = np.full(len(queries), np.inf)
    for q, (_, gold) in enumerate(queries):
        if gold not in known:
            logger.warning('Query %d: gold concept %s is not in the dictionary, counted as a miss.', q, gold)
            continue
        hits = np.flatnonzero(concepts[ids[q]] == gold)
        if len(hits):
            first_hit[q] = hits[0]
    return {k: float((first_hit < k).mean()) for k in ks}


def probe_pairs(params, pairs):
    """
    Return the similarity of representative term pairs under encoder params.
    Parameters
    ----------
    params: EncoderParams
        An encoder.
    pairs: list
        (surface 1, surface 2, same concept or None) triples.
    """
    report = []
    for first, second, same in pairs:
        sim = float(np.dot(params.encode(first), params.encode(second)))
        report.append({'term1': first, 'term2': second, 'similarity': sim, 'same_concept': same})
    return report


def _atomic_text(path, text):
    tmp = '%s.tmp' % path
    with io.open(tmp, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    os.replace(tmp, path)


def write_reports_json(path, reports):
    """
    Write one report as a JSON object or a list of reports as a JSON array.
    """
    if isinstance(reports, EvalReport):
        payload = reports.to_dict()
    else:
        payload = [r.to_dict() for r in reports]
    _atomic_text(path, json.dumps(payload, indent=2) + '\n')


def write_sweep_csv(path, reports):
    """
    Write theta,precision,recall,f1 rows.
    """
    buff = io.StringIO(newline='')
    writer = csv.writer(buff, lineterminator='\n')
    writer.writerow(['theta', 'precision', 'recall', 'f1'])
    for r in reports:
        writer.writerow(['%.4f' % r.theta, '%.6f' % r.precision, '%.6f' % r.recall, '%.6f' % r.f1])
    _atomic_text(path, buff.getvalue())


def read_sweep_csv(path):
    """
    Read a sweep CSV back as a list of dicts of floats.
    """
    with io.open(path, 'r', encoding='utf-8', newline='') as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
