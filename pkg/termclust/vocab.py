"""
Term vocabularies with concept ground truth.
A vocabulary file is UTF-8 TSV, one `concept_id<TAB>surface` per line, no header.
"""
import io
import os
import logging
import unicodedata
from dataclasses import dataclass

import numpy as np

from .errors import VocabularyParseError, EmptyVocabularyError, SynthSpecError, SizeMismatchError


logger = logging.getLogger(__name__)


VARIANT_KINDS = ('numeric-qualifier', 'suffix-token', 'body-part-token', 'abbreviation')

_SUFFIX_TOKENS = ('gene', 'protein', 'receptor', 'antigen', 'syndrome', 'disease',
                  'deficiency', 'inhibitor', 'antibody', 'kinase')
_BODY_PART_TOKENS = ('left', 'right', 'upper', 'lower', 'arm', 'leg', 'liver', 'kidney',
                     'lung', 'skin', 'eye', 'bone')
_ONSETS = ('b', 'c', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v',
           'z', 'br', 'ch', 'cr', 'gl', 'ph', 'pr', 'st', 'th', 'tr', 'x')
_VOWELS = ('a', 'e', 'i', 'o', 'u', 'y', 'ae', 'io', 'ou')
_CODAS = ('', '', '', 'n', 'l', 's', 'r', 'x', 'm', 'ne', 'se')


def normalize_surface(surface):
    """
    Compatibility-normalize (NFKC) and lowercase a surface.
    """
    return unicodedata.normalize('NFKC', surface).lower()


class Vocabulary:
    """
    An ordered list of terms. Term i has the surface surfaces[i]
    and the concept concept_ids[i]; term ids are 0..n-1.
    """
    def __init__(self, surfaces, concept_ids):
        """
        Parameters
        ----------
        surfaces: list of str
            Surfaces in term id order.
        concept_ids: list of str
            Concept ids in term id order.
        """
        if len(surfaces) != len(concept_ids):
            raise SizeMismatchError('%d surfaces but %d concept ids.' % (len(surfaces), len(concept_ids)))
        self._surfaces = tuple(surfaces)
        self._concept_ids = tuple(concept_ids)


    def __len__(self):
        return len(self._surfaces)


    def __eq__(self, other):
        return isinstance(other, Vocabulary) and \
            self._surfaces == other._surfaces and \
            self._concept_ids == other._concept_ids


    def __hash__(self):
        return hash((self._surfaces, self._concept_ids))


    def __repr__(self):
        return '<%s n=%d concepts=%d>' % (self.__class__.__name__,
                                          self.n,
                                          len(set(self._concept_ids)))


    @property
    def n(self):
        return len(self._surfaces)


    @property
    def surfaces(self):
        return self._surfaces


    @property
    def concept_ids(self):
        return self._concept_ids


    def surface_of(self, term_id):
        return self._surfaces[term_id]


    def concept_of(self, term_id):
        return self._concept_ids[term_id]


    def terms(self):
        """
        Iterate (term_id, surface, concept_id) triples.
        """
        for term_id, (surface, concept_id) in enumerate(zip(self._surfaces, self._concept_ids)):
            yield term_id, surface, concept_id


    def to_tsv(self):
        """
        Return the TSV text of the vocabulary.
        """
        return ''.join('%s\t%s\n' % (c, s) for s, c in zip(self._surfaces, self._concept_ids))


class ClusterMap:
    """
    The partition of term ids by concept id (the ground truth clusters).
    Concepts get dense labels 0..k-1 in order of first appearance.
    """
    def __init__(self, clusters, n):
        """
        Parameters
        ----------
        clusters: dict
            concept_id -> sorted numpy array of term ids (insertion order = label order).
        n: int
            A number of terms.
        """
        self._clusters = clusters
        self._n = n
        self._concepts = list(clusters)
        self._label_index = {c: i for i, c in enumerate(self._concepts)}
        self._labels = np.empty(n, dtype=np.int64)
        for label, members in enumerate(clusters.values()):
            self._labels[members] = label
        sizes = np.array([len(m) for m in clusters.values()], dtype=np.int64)
        self._sizes = sizes
        self.singleton_count = int((sizes == 1).sum())
        self._multi_term_ids = None
        self._internal_pairs = None


    def __len__(self):
        return len(self._clusters)


    def __getitem__(self, concept_id):
        return self._clusters[concept_id]


    def __contains__(self, concept_id):
        return concept_id in self._clusters


    def __iter__(self):
        return iter(self._clusters)


    def __eq__(self, other):
        if not isinstance(other, ClusterMap) or self._n != other._n:
            return False
        if list(self._clusters) != list(other._clusters):
            return False
        return all(np.array_equal(self._clusters[c], other._clusters[c]) for c in self._clusters)


    def __repr__(self):
        return '<%s clusters=%d n=%d singletons=%d>' % (self.__class__.__name__,
                                                        len(self._clusters),
                                                        self._n,
                                                        self.singleton_count)


    @property
    def n(self):
        return self._n


    @property
    def clusters(self):
        return self._clusters


    @property
    def concepts(self):
        """
        Concept ids in label order.
        """
        return self._concepts


    @property
    def labels(self):
        """
        Dense concept label of every term id.
        """
        return self._labels


    @property
    def sizes(self):
        """
        Cluster sizes in label order.
        """
        return self._sizes


    def members(self, term_id):
        """
        Return the term ids of the cluster of term_id.
        """
        return self._clusters[self._concepts[self._labels[term_id]]]


    def label_of(self, concept_id):
        return self._label_index[concept_id]


    @property
    def multi_term_ids(self):
        """
        Term ids whose concept has at least two terms (sorted).
        """
        if self._multi_term_ids is None:
            self._multi_term_ids = np.flatnonzero(self._sizes[self._labels] >= 2)
        return self._multi_term_ids


    @property
    def positive_pair_count(self):
        """
        The number of unordered same-concept term pairs.
        """
        return int((self._sizes * (self._sizes - 1) // 2).sum())


    def internal_pairs(self):
        """
        Return (lo, hi) arrays of all unordered same-concept pairs, lo < hi.
        """
        if self._internal_pairs is None:
            los, his = [], []
            for members in self._clusters.values():
                if len(members) < 2:
                    continue
                a, b = np.triu_indices(len(members), k=1)
                los.append(members[a])
                his.append(members[b])
            if los:
                self._internal_pairs = (np.concatenate(los), np.concatenate(his))
            else:
                empty = np.empty(0, dtype=np.int64)
                self._internal_pairs = (empty, empty)
        return self._internal_pairs


def _iter_lines(path):
    """
    Iterate (line_number, decoded line) of a UTF-8 file.
    """
    with io.open(path, 'rb') as f:
        for line_number, raw in enumerate(f, 1):
            try:
                yield line_number, raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise VocabularyParseError(path, line_number, 'not valid UTF-8 (%s)' % e.reason)


def load_vocabulary(path, normalize=True):
    """
    Load a vocabulary TSV. Term ids follow the file order, blank lines are skipped.
    Parameters
    ----------
    path: str
        A path of the TSV file.
    normalize: bool
        Apply NFKC normalization and lowercasing to every surface.
    """
    surfaces = []
    concept_ids = []
    for line_number, line in _iter_lines(path):
        line = line.rstrip('\n').rstrip('\r')
        if not line.strip():
            continue
        if '\t' not in line:
            raise VocabularyParseError(path, line_number, 'missing tab between concept id and surface')
        concept_id, surface = line.split('\t', 1)
        if not concept_id:
            raise VocabularyParseError(path, line_number, 'empty concept id')
        if normalize:
            surface = normalize_surface(surface)
        if not surface:
            raise VocabularyParseError(path, line_number, 'empty surface')
        concept_ids.append(concept_id)
        surfaces.append(surface)
    if not surfaces:
        raise EmptyVocabularyError('The vocabulary %s has no terms.' % path)
    logger.info('Loaded %d terms from %s', len(surfaces), path)
    return Vocabulary(surfaces, concept_ids)


def write_vocabulary(path, vocab):
    """
    Write a vocabulary TSV atomically.
    """
    tmp = '%s.tmp' % path
    with io.open(tmp, 'w', encoding='utf-8', newline='\n') as f:
        f.write(vocab.to_tsv())
    os.replace(tmp, path)


def concept_clusters(vocab):
    """
    Return the ClusterMap of a vocabulary.
    """
    groups = {}
    for term_id, concept_id in enumerate(vocab.concept_ids):
        groups.setdefault(concept_id, []).append(term_id)
    clusters = {c: np.array(ids, dtype=np.int64) for c, ids in groups.items()}
    return ClusterMap(clusters, vocab.n)


@dataclass
class SynthSpec:
    """
    Parameters of a synthetic vocabulary.
    """
    concept_count: int = 5000
    synonyms_min: int = 2
    synonyms_max: int = 6
    hard_family_fraction: float = 0.5
    variant_kinds: tuple = VARIANT_KINDS
    rng_seed: int = 42


    def validate(self):
        if self.concept_count < 2:
            raise SynthSpecError('concept_count must be >= 2 (got %d).' % self.concept_count)
        if self.synonyms_min < 1:
            raise SynthSpecError('synonyms_min must be >= 1 (got %d).' % self.synonyms_min)
        if self.synonyms_max < self.synonyms_min:
            raise SynthSpecError('synonyms_max must be >= synonyms_min.')
        if not 0.0 <= self.hard_family_fraction <= 1.0:
            raise SynthSpecError('hard_family_fraction must be in [0, 1] (got %r).'
                                 % self.hard_family_fraction)
        if not self.variant_kinds:
            raise SynthSpecError('variant_kinds must not be empty.')
        unknown = set(self.variant_kinds) - set(VARIANT_KINDS)
        if unknown:
            raise SynthSpecError('Unknown variant kinds: %s.' % ', '.join(sorted(unknown)))
        return self


class SynthGenerator:
    """
    A generator of synthetic vocabularies with hard families: groups of 2-4
    concepts sharing a base string and differing by one variant token
    (e.g. "type 1 ..." vs "type 2 ..."). Synonyms of a concept are
    token reorderings, abbreviations, plurals and aliases of its base.
    """
    def __init__(self, spec):
        self._spec = spec.validate()
        self._rng = np.random.default_rng(spec.rng_seed)
        self.base_registry = []
        self._bases = set()


    def _word(self, syllables):
        rng = self._rng
        parts = []
        for _ in range(syllables):
            parts.append(_ONSETS[rng.integers(len(_ONSETS))])
            parts.append(_VOWELS[rng.integers(len(_VOWELS))])
        parts.append(_CODAS[rng.integers(len(_CODAS))])
        return ''.join(parts)


    def _tokens(self):
        rng = self._rng
        count = int(rng.integers(1, 4))
        return [self._word(int(rng.integers(2, 5))) for _ in range(count)]


    def _new_base(self):
        while True:
            tokens = self._tokens()
            key = ' '.join(tokens)
            if key not in self._bases:
                self._bases.add(key)
                self.base_registry.append(key)
                return tokens


    def _variants(self, kind, count):
        rng = self._rng
        if kind == 'numeric-qualifier':
            pool = [str(d) for d in range(1, 10)]
        elif kind == 'suffix-token':
            pool = list(_SUFFIX_TOKENS)
        elif kind == 'body-part-token':
            pool = list(_BODY_PART_TOKENS)
        else:
            pool = sorted({self._word(1)[:3] for _ in range(4 * count + 8)})
            while len(pool) < count:
                pool.append('%s%d' % (pool[0], len(pool)))
        picked = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in picked]


    def _transforms(self, base, count):
        """
        Return count synonym transformations of a base (list of tokens);
        the first one is the identity. A transformation maps a variant token
        (or None) to a surface.
        """
        rng = self._rng
        candidates = []
        if len(base) >= 2:
            order = list(rng.permutation(len(base)))
            if order == list(range(len(base))):
                order = order[1:] + order[:1]
            candidates.append(('reorder', order))
            candidates.append(('abbreviation', None))
        candidates.append(('plural', None))
        rng.shuffle(candidates)
        transforms = [('identity', None)]
        for candidate in candidates:
            if len(transforms) == count:
                break
            transforms.append(candidate)
        while len(transforms) < count:
            transforms.append(('alias', self._tokens()))
        return transforms


    @staticmethod
    def _apply(base, transform, variant):
        kind, arg = transform
        if kind == 'reorder':
            tokens = [base[i] for i in arg]
        elif kind == 'abbreviation':
            tokens = [''.join(t[0] for t in base)]
        elif kind == 'plural':
            tokens = base[:-1] + [base[-1] + 's']
        elif kind == 'alias':
            tokens = list(arg)
        else:
            tokens = list(base)
        if variant is not None:
            tokens = tokens + [variant]
        return ' '.join(tokens)


    def _synonym_count(self):
        spec = self._spec
        return int(self._rng.integers(spec.synonyms_min, spec.synonyms_max + 1))


    def generate(self):
        """
        Return (Vocabulary, ClusterMap).
        """
        spec = self._spec
        rng = self._rng
        kinds = [k for k in VARIANT_KINDS if k in spec.variant_kinds]
        surfaces = []
        concept_ids = []
        family_budget = int(round(spec.hard_family_fraction * spec.concept_count))
        made = 0
        while made < spec.concept_count:
            concept_left = spec.concept_count - made
            if family_budget >= 2 and concept_left >= 2:
                size = int(min(rng.integers(2, 5), family_budget, concept_left))
                family_budget -= size
                kind = kinds[int(rng.integers(len(kinds)))]
                variants = self._variants(kind, size)
            else:
                size = 1
                variants = [None]
            base = self._new_base()
            transforms = self._transforms(base, self._synonym_count())
            for variant in variants:
                concept_id = 'C%07d' % made
                made += 1
                for transform in transforms:
                    concept_ids.append(concept_id)
                    surfaces.append(self._apply(base, transform, variant))
        vocab = Vocabulary(surfaces, concept_ids)
        return vocab, concept_clusters(vocab)


def synth_vocabulary(spec):
    """
    Generate a deterministic synthetic vocabulary; see SynthGenerator.
    """
    return SynthGenerator(spec).generate()
