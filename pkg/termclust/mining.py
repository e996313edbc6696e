"""
Mini-batch construction: random anchors, k same-concept positives and
m possibly hard negatives read from the current neighbor table.
The neighbor table decides hardness only; the concept labels decide which
entries act as positives or negatives in the loss.
"""
from dataclasses import dataclass

import numpy as np

from .errors import NoMultiTermConceptError, SingletonConceptError, NeighborCountError


@dataclass
class MiniBatch:
    """
    b anchor blocks, each (anchor, k positives, m possibly hard negatives).
    """
    term_ids: np.ndarray
    surfaces: list
    labels: np.ndarray
    b: int
    k: int
    m: int


    def __len__(self):
        return len(self.term_ids)


    @property
    def block_size(self):
        return 1 + self.k + self.m


    def block(self, i):
        """
        Return the slice of entries of anchor block i.
        """
        return slice(i * self.block_size, (i + 1) * self.block_size)


def sample_anchors(vocab, clusters, b, rng):
    """
    Sample b anchor term ids uniformly among terms whose concept has at least
    two terms; without replacement when there are enough of them.
    Parameters
    ----------
    vocab: Vocabulary
        The vocabulary (anchors are its term ids).
    clusters: ClusterMap
        The ground truth clusters of the vocabulary.
    b: int
        A number of anchors.
    rng: numpy.random.Generator
        A random generator.
    """
    eligible = clusters.multi_term_ids
    if len(eligible) == 0:
        raise NoMultiTermConceptError('No concept of the vocabulary has two or more terms.')
    replace = b > len(eligible)
    return eligible[rng.choice(len(eligible), size=b, replace=replace)]


def sample_positives(clusters, t, k, rng):
    """
    Sample k other terms of t's concept; without replacement if the concept
    has at least k other terms, otherwise with replacement.
    """
    members = clusters.members(t)
    others = members[members != t]
    if len(others) == 0:
        raise SingletonConceptError('Term %d is the only term of its concept.' % t)
    replace = len(others) < k
    return others[rng.choice(len(others), size=k, replace=replace)]


def hard_negatives(table, t, m):
    """
    Return the first m ids of row t of the neighbor table, most similar first.
    """
    if m > table.m:
        raise NeighborCountError('The table holds %d neighbors per term, %d requested.' % (table.m, m))
    return table.ids[t, :m]


def build_minibatch(vocab, clusters, table, b, k, m, rng):
    """
    Return a MiniBatch of b(1 + k + m) entries labelled by concept.
    """
    anchors = sample_anchors(vocab, clusters, b, rng)
    blocks = []
    for t in anchors:
        blocks.append(np.array([t], dtype=np.int64))
        blocks.append(sample_positives(clusters, t, k, rng))
        if m:
            blocks.append(hard_negatives(table, t, m))
    term_ids = np.concatenate(blocks).astype(np.int64)
    surfaces = [vocab.surface_of(i) for i in term_ids]
    return MiniBatch(term_ids=term_ids,
                     surfaces=surfaces,
                     labels=clusters.labels[term_ids],
                     b=b,
                     k=k,
                     m=m)


def hard_negative_same_concept_fraction(table, clusters, m=None):
    """
    Return the fraction of the first m neighbors of all terms that share the
    term's concept. A poorly trained encoder gives a low value.
    """
    m = table.m if m is None else m
    labels = clusters.labels
    return float((labels[table.ids[:, :m]] == labels[:, None]).mean())
