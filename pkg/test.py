"""
A testing executor with pytest.
"""

import pytest
import os
import io
import json
import struct
import hashlib
import logging
import tracemalloc
from decimal import Decimal, getcontext

import numpy as np

from termclust import  Vocabulary, \
                        ClusterMap, \
                        SynthSpec, \
                        SynthGenerator, \
                        load_vocabulary, \
                        write_vocabulary, \
                        concept_clusters, \
                        synth_vocabulary, \
                        EncoderParams, \
                        init_params, \
                        NeighborTable, \
                        build_neighbor_table, \
                        top_m, \
                        cosine, \
                        LossHyper, \
                        TrainConfig, \
                        Trainer, \
                        TrainerIsNotStartedError, \
                        train, \
                        evaluate, \
                        sweep, \
                        brute_force_evaluate, \
                        brute_force_sweep, \
                        connected_components, \
                        linking_accuracy
from termclust.errors import   VocabularyParseError, \
                                EmptyVocabularyError, \
                                EmptySurfaceError, \
                                SynthSpecError, \
                                NeighborCountError, \
                                NoMultiTermConceptError, \
                                SingletonConceptError, \
                                ConfigError, \
                                FormatError, \
                                GuardError, \
                                NonFiniteError, \
                                ZeroVectorError, \
                                SizeMismatchError, \
                                ValidationError, \
                                ArtifactIOError
from termclust.encoder import  SparseRows, PAD_LEFT, PAD_RIGHT, char_ngrams, hash_ngram, \
                                save_embeddings, load_embeddings, save_checkpoint, load_checkpoint
from termclust.simindex import save_table, load_table, search, select_top, similarity_block, prepare, \
                                BLOCK_ROWS
from termclust.mining import   MiniBatch, sample_anchors, sample_positives, hard_negatives, \
                                build_minibatch, hard_negative_same_concept_fraction
from termclust.msloss import   MinedPairs, pairwise_sims, mine_pairs, ms_loss, ms_loss_grad, \
                                ms_loss_and_grad, backprop_to_embeddings, loss_denominator
from termclust.trainer import  OptimizerState, lr_at, adamw_step, accumulate, ablation_config, \
                                batch_gradient
from termclust.clustereval import  EvalReport, StoredPairs, predict_pairs, brute_force_table, \
                                    probe_pairs, write_sweep_csv, read_sweep_csv, pair_count
from termclust.shard_pool import   ShardPool, \
                                    ShardPoolAlreadyStartedError, \
                                    ShardPoolAlreadyStoppedError, \
                                    ShardPoolNotAliveError, \
                                    run_shards
from termclust.cli import main


def _write(path, text):
    with io.open(str(path), 'w', encoding='utf-8') as f:
        f.write(text)
    return str(path)


def _unit_rows(rng, n, dim):
    e = rng.normal(size=(n, dim))
    return e / np.linalg.norm(e, axis=1)[:, None]


def _clustered_embeddings(rng, concept_count, per_concept, dim, noise):
    """
    Embeddings scattered around one random center per concept.
    Return (embeddings, clusters).
    """
    centers = _unit_rows(rng, concept_count, dim)
    labels = np.repeat(np.arange(concept_count), per_concept)
    e = centers[labels] + noise * rng.normal(size=(len(labels), dim))
    vocab = Vocabulary(['t%d' % i for i in range(len(labels))], ['C%d' % c for c in labels])
    return e, concept_clusters(vocab)


def _four_term_instance():
    """
    Clusters {0, 1}, {2, 3}; S01 = 0.9, S23 = 0.5, cross similarities <= 0.2.
    """
    ids = np.array([[1, 2, 3],
                    [0, 2, 3],
                    [3, 0, 1],
                    [2, 0, 1]])
    sims = np.array([[0.9, 0.2, 0.1],
                     [0.9, 0.1, 0.1],
                     [0.5, 0.2, 0.1],
                     [0.5, 0.1, 0.1]], dtype=np.float32)
    vocab = Vocabulary(['a', 'b', 'c', 'd'], ['X', 'X', 'Y', 'Y'])
    return NeighborTable(ids, sims), concept_clusters(vocab)


@pytest.fixture
def small_vocab():
    spec = SynthSpec(concept_count=40, synonyms_min=2, synonyms_max=4, rng_seed=3)
    return synth_vocabulary(spec)


@pytest.fixture
def small_config():
    return TrainConfig(b=4,
                       k=3,
                       m=5,
                       total_steps=6,
                       warmup_steps=2,
                       refresh_interval_steps=2,
                       log_interval_steps=1,
                       bucket_count=2048,
                       dim=16,
                       probe_anchors=4)


@pytest.mark.vocab
def test_load_vocabulary(tmp_path):
    path = _write(tmp_path / 'v.tsv', 'C1\theadache\nC1\tcephalgia\n\nC2\tpink urine\n')
    vocab = load_vocabulary(path)
    clusters = concept_clusters(vocab)

    assert vocab.n == 3
    assert vocab.surfaces == ('headache', 'cephalgia', 'pink urine')
    assert list(clusters['C1']) == [0, 1]
    assert list(clusters['C2']) == [2]
    assert clusters.singleton_count == 1
    assert clusters.positive_pair_count == 1


@pytest.mark.vocab
def test_load_vocabulary_single_term(tmp_path):
    vocab = load_vocabulary(_write(tmp_path / 'v.tsv', 'C9\tx\n'))
    clusters = concept_clusters(vocab)

    assert vocab.n == 1
    assert len(clusters) == 1
    assert clusters.singleton_count == 1


@pytest.mark.vocab
@pytest.mark.parametrize(
    'text,line_number',
    [
        ('C1 headache\n', 1),
        ('C1\theadache\n\tcephalgia\n', 2),
        ('C1\theadache\nC2\t\n', 2),
    ]
)
def test_load_vocabulary_parse_error(tmp_path, text, line_number):
    path = _write(tmp_path / 'v.tsv', text)
    with pytest.raises(VocabularyParseError) as info:
        load_vocabulary(path)
    assert info.value.line_number == line_number
    assert str(info.value).startswith('%s:%d:' % (path, line_number))


@pytest.mark.vocab
@pytest.mark.parametrize(
    'payload,line_number',
    [
        (b'\xff\xfeC1\theadache\n', 1),
        (b'C1\theadache\nC1\tcephal\xe9e\n', 2),
        (b'C1\theadache\n\nC2\tpink\x80urine\n', 3),
    ]
)
def test_load_vocabulary_invalid_utf8(tmp_path, payload, line_number):
    path = str(tmp_path / 'v.tsv')
    with io.open(path, 'wb') as f:
        f.write(payload)
    with pytest.raises(VocabularyParseError) as info:
        load_vocabulary(path)
    assert info.value.line_number == line_number
    assert 'UTF-8' in str(info.value)


@pytest.mark.vocab
def test_vocabulary_length_mismatch():
    with pytest.raises(SizeMismatchError):
        Vocabulary(['a', 'b'], ['C1'])


@pytest.mark.vocab
def test_load_vocabulary_empty(tmp_path):
    with pytest.raises(EmptyVocabularyError):
        load_vocabulary(_write(tmp_path / 'v.tsv', '\n\n'))


@pytest.mark.vocab
def test_load_vocabulary_normalization(tmp_path):
    path = _write(tmp_path / 'v.tsv', 'C1\tＴｙｐｅ 1 Diabetes\nC1\tType 1 diabetes\n')

    assert load_vocabulary(path).surfaces == ('type 1 diabetes', 'type 1 diabetes')
    assert load_vocabulary(path, normalize=False).surface_of(1) == 'Type 1 diabetes'


@pytest.mark.vocab
def test_duplicates_are_distinct_terms(tmp_path):
    vocab = load_vocabulary(_write(tmp_path / 'v.tsv', 'C1\tflu\nC1\tflu\nC2\tflu\n'))
    clusters = concept_clusters(vocab)

    assert vocab.n == 3
    assert list(clusters['C1']) == [0, 1]
    assert clusters.label_of('C2') == 1


@pytest.mark.vocab
@pytest.mark.parametrize('shared', [True, False])
def test_concept_clusters_extremes(shared):
    n = 7
    concepts = ['C'] * n if shared else ['C%d' % i for i in range(n)]
    clusters = concept_clusters(Vocabulary(['s%d' % i for i in range(n)], concepts))

    if shared:
        assert len(clusters) == 1
        assert list(clusters.sizes) == [n]
        assert len(clusters.multi_term_ids) == n
    else:
        assert clusters.singleton_count == n
        assert len(clusters.multi_term_ids) == 0
        assert len(clusters.internal_pairs()[0]) == 0


@pytest.mark.vocab
def test_vocabulary_roundtrip(tmp_path, small_vocab):
    vocab, _ = small_vocab
    path = str(tmp_path / 'v.tsv')
    write_vocabulary(path, vocab)

    assert load_vocabulary(path, normalize=False) == vocab


@pytest.mark.vocab
def test_synth_hard_family():
    spec = SynthSpec(concept_count=2,
                     synonyms_min=2,
                     synonyms_max=2,
                     hard_family_fraction=1.0,
                     variant_kinds=('numeric-qualifier',),
                     rng_seed=7)
    vocab, clusters = synth_vocabulary(spec)

    assert vocab.n == 4
    assert len(clusters) == 2
    first, second = [list(clusters[c]) for c in clusters]
    for i, j in zip(first, second):
        a = vocab.surface_of(i).split(' ')
        b = vocab.surface_of(j).split(' ')
        assert a[:-1] == b[:-1]
        assert a[-1] != b[-1]
        assert a[-1].isdigit() and b[-1].isdigit()


@pytest.mark.vocab
def test_synth_deterministic():
    spec = SynthSpec(concept_count=50, rng_seed=11)

    assert synth_vocabulary(spec)[0].to_tsv() == synth_vocabulary(spec)[0].to_tsv()
    assert synth_vocabulary(spec)[0] != synth_vocabulary(SynthSpec(concept_count=50, rng_seed=12))[0]


@pytest.mark.vocab
def test_synth_without_families():
    generator = SynthGenerator(SynthSpec(concept_count=100, hard_family_fraction=0.0))
    vocab, clusters = generator.generate()

    assert len(clusters) == 100
    assert len(generator.base_registry) == 100
    assert len(set(generator.base_registry)) == 100


@pytest.mark.vocab
def test_synth_sizes():
    spec = SynthSpec(concept_count=60, synonyms_min=3, synonyms_max=5)
    _, clusters = synth_vocabulary(spec)

    assert len(clusters) == 60
    assert clusters.sizes.min() >= 3
    assert clusters.sizes.max() <= 5


@pytest.mark.vocab
@pytest.mark.parametrize(
    'kwargs',
    [
        {'concept_count': 1},
        {'synonyms_min': 0},
        {'synonyms_min': 4, 'synonyms_max': 3},
        {'hard_family_fraction': 1.5},
        {'variant_kinds': ()},
        {'variant_kinds': ('color',)},
    ]
)
def test_synth_spec_validation(kwargs):
    with pytest.raises(SynthSpecError):
        SynthSpec(**kwargs).validate()


@pytest.mark.encoder
def test_char_ngrams():
    assert char_ngrams('ab', 3, 3) == [PAD_LEFT + 'ab', 'ab' + PAD_RIGHT]
    assert len(char_ngrams('diabetes', 3, 5)) == 8 + 7 + 6
    assert char_ngrams('a', 4, 4) == [PAD_LEFT + 'a' + PAD_RIGHT]


@pytest.mark.encoder
def test_featurize():
    params = init_params(bucket_count=1024, dim=8, ngram_min=3, ngram_max=3, hash_seed=1)

    assert len(params.featurize('ab')) == 2
    assert np.array_equal(params.featurize('type 1 diabetes'), params.featurize('type 1 diabetes'))
    assert np.all((params.featurize('kidney') >= 0) & (params.featurize('kidney') < 1024))


@pytest.mark.encoder
def test_featurize_seeds():
    rng = np.random.default_rng(0)
    a = init_params(bucket_count=2 ** 18, dim=4, hash_seed=1)
    b = init_params(bucket_count=2 ** 18, dim=4, hash_seed=2)
    differ = 0
    for _ in range(100):
        surface = ''.join(rng.choice(list('abcdefghij'), size=8))
        if sorted(a.featurize(surface)) != sorted(b.featurize(surface)):
            differ += 1
    assert differ >= 99


@pytest.mark.encoder
def test_encode_unit_norm():
    params = init_params(bucket_count=4096, dim=32, seed=5)
    rng = np.random.default_rng(1)
    surfaces = [''.join(rng.choice(list('abcdefgh 123'), size=int(rng.integers(1, 20)))) for _ in range(1000)]
    surfaces = [s for s in surfaces if s]
    e = params.encode_batch(surfaces)

    assert e.shape == (len(surfaces), 32)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)


@pytest.mark.encoder
def test_encode_zero_table():
    params = EncoderParams(np.zeros((64, 8)))
    e = params.encode_batch(['flu', 'influenza'])

    assert np.array_equal(e, np.tile(np.eye(8)[0], (2, 1)))


@pytest.mark.encoder
def test_encode_reference():
    rng = np.random.default_rng(2)
    table = rng.normal(size=(997, 12))
    params = EncoderParams(table, 3, 5, hash_seed=123, max_chars=64)
    padded = PAD_LEFT + 'type 1 diabetes' + PAD_RIGHT
    rows = []
    for size in range(3, 6):
        for i in range(len(padded) - size + 1):
            digest = hashlib.blake2b(padded[i:i + size].encode('utf-8'),
                                     digest_size=8,
                                     key=struct.pack('<Q', 123)).digest()
            rows.append(int.from_bytes(digest, 'little') % 997)
    z = np.mean([table[r] for r in rows], axis=0)

    assert hash_ngram('abc', 123) == int.from_bytes(
        hashlib.blake2b(b'abc', digest_size=8, key=struct.pack('<Q', 123)).digest(), 'little')
    assert np.allclose(params.encode('type 1 diabetes'), z / np.linalg.norm(z), atol=1e-12)


@pytest.mark.encoder
def test_encode_batch_consistency():
    params = init_params(bucket_count=512, dim=8, seed=3)
    surfaces = ['headache', 'cephalgia', 'pink urine']
    e = params.encode_batch(surfaces)

    for i, surface in enumerate(surfaces):
        assert np.array_equal(e[i], params.encode(surface))
    assert params.encode_batch([]).shape == (0, 8)


@pytest.mark.encoder
def test_encode_batch_chunks_threads():
    params = init_params(bucket_count=2048, dim=8, seed=3)
    surfaces = ['term %d' % i for i in range(5000)]

    assert np.array_equal(params.encode_batch(surfaces, threads=1), params.encode_batch(surfaces, threads=4))


@pytest.mark.encoder
@pytest.mark.parametrize('bucket_count', [0, 3, 1000, 2 ** 10 + 1, 64.0])
def test_init_params_bucket_count(bucket_count):
    with pytest.raises(ValidationError):
        init_params(bucket_count=bucket_count, dim=4)


@pytest.mark.encoder
def test_empty_surface():
    params = init_params(bucket_count=64, dim=4)
    with pytest.raises(EmptySurfaceError):
        params.encode('')
    with pytest.raises(EmptySurfaceError) as info:
        params.encode_batch(['flu', '', 'cold'])
    assert info.value.index == 1


@pytest.mark.encoder
def test_encode_grad_parallel_upstream():
    params = EncoderParams(np.random.default_rng(4).normal(size=(128, 6)), 2, 4)
    e = params.encode('nephritis')
    grad = params.encode_grad('nephritis', e)

    assert np.allclose(grad.values, 0.0, atol=1e-12)


@pytest.mark.encoder
def test_encode_grad_single_ngram():
    params = EncoderParams(np.random.default_rng(4).normal(size=(128, 6)), 3, 3)
    grad = params.encode_grad('a', np.ones(6))

    assert len(grad.rows) == 1


def _dense(sparse, shape):
    dense = np.zeros(shape)
    dense[sparse.rows] = sparse.values
    return dense


@pytest.mark.encoder
def test_encode_grad_finite_differences():
    rng = np.random.default_rng(6)
    params = EncoderParams(rng.normal(size=(48, 5)), 2, 3, hash_seed=9)
    upstream = rng.normal(size=5)
    surface = 'renal failure'
    analytic = _dense(params.encode_grad(surface, upstream), params.table.shape)
    h = 1e-5
    numeric = np.zeros_like(params.table)
    for r in range(params.bucket_count):
        for c in range(params.dim):
            saved = params.table[r, c]
            params.table[r, c] = saved + h
            plus = upstream @ params.encode(surface)
            params.table[r, c] = saved - h
            minus = upstream @ params.encode(surface)
            params.table[r, c] = saved
            numeric[r, c] = (plus - minus) / (2 * h)

    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.encoder
def test_embeddings_file(tmp_path):
    e = _unit_rows(np.random.default_rng(0), 10, 4).astype(np.float32)
    path = str(tmp_path / 'e.bin')
    save_embeddings(path, e)

    assert np.array_equal(load_embeddings(path), e)
    _write(path, 'garbage')
    with pytest.raises(FormatError):
        load_embeddings(path)


@pytest.mark.encoder
def test_checkpoint_file(tmp_path):
    params = init_params(bucket_count=256, dim=8, ngram_min=2, ngram_max=4, hash_seed=77, max_chars=32, seed=1)
    path = str(tmp_path / 'p.ckpt')
    save_checkpoint(path, params)
    loaded, state = load_checkpoint(path)

    assert state is None
    assert np.array_equal(loaded.table, params.table)
    assert loaded.hyperparameters == params.hyperparameters
    assert np.array_equal(loaded.encode('flu'), params.encode('flu'))

    first = np.full(params.table.shape, 0.5, dtype=np.float32)
    second = np.full(params.table.shape, 0.25, dtype=np.float32)
    save_checkpoint(path, params, 12, (first, second))
    _, state = load_checkpoint(path)

    assert state[0] == 12
    assert np.array_equal(state[1], first)
    assert np.array_equal(state[2], second)


@pytest.mark.simindex
@pytest.mark.parametrize(
    'a,b,expected',
    [
        ((1.0, 0.0), (1.0, 0.0), 1.0),
        ((1.0, 0.0), (0.0, 1.0), 0.0),
        ((0.6, 0.8), (1.0, 0.0), 0.6),
    ]
)
def test_cosine(a, b, expected):
    assert cosine(a, b) == pytest.approx(expected)


@pytest.mark.simindex
def test_cosine_errors():
    with pytest.raises(ZeroVectorError):
        cosine((0.0, 0.0), (1.0, 0.0))
    with pytest.raises(NonFiniteError):
        cosine((np.nan, 0.0), (1.0, 0.0))


@pytest.mark.simindex
def test_top_m_duplicates():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ids, sims = top_m(e, 0, 1)

    assert list(ids) == [1]
    assert sims[0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.simindex
def test_top_m_all_others():
    e = _unit_rows(np.random.default_rng(3), 6, 3)
    ids, sims = top_m(e, 2, 5)

    assert sorted(ids) == [0, 1, 3, 4, 5]
    assert np.all(np.diff(sims) <= 0)


@pytest.mark.simindex
@pytest.mark.parametrize('m', [0, 6, -1])
def test_top_m_bad_m(m):
    with pytest.raises(NeighborCountError):
        top_m(_unit_rows(np.random.default_rng(3), 6, 3), 0, m)


@pytest.mark.simindex
def test_neighbor_table_ties():
    table = build_neighbor_table(np.eye(4), 2)

    assert np.array_equal(table.sims, np.zeros((4, 2), dtype=np.float32))
    assert table.ids.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]


@pytest.mark.simindex
@pytest.mark.parametrize(
    'n,m,threads,block_rows',
    [
        (50, 5, 1, 128),
        (500, 10, 4, 128),
        (300, 299, 2, 128),
    ]
)
def test_neighbor_table_oracle(n, m, threads, block_rows):
    e = _unit_rows(np.random.default_rng(n), n, 8)
    table = build_neighbor_table(e, m, threads=threads, block_rows=block_rows)
    ids, sims = brute_force_table(e, m)

    assert np.array_equal(table.ids, ids)
    assert np.array_equal(table.sims, sims)
    table.check()
    for i in (0, n // 2, n - 1):
        row_ids, row_sims = top_m(e, i, m)
        assert np.array_equal(row_ids, table.ids[i])
        assert np.array_equal(row_sims, table.sims[i])


@pytest.mark.simindex
def test_neighbor_table_with_ties_oracle():
    # a coarse grid of directions makes many exact ties
    rng = np.random.default_rng(8)
    e = rng.integers(-1, 2, size=(200, 3)).astype(np.float64)
    e[np.all(e == 0, axis=1)] = (1.0, 0.0, 0.0)
    table = build_neighbor_table(e, 7, threads=3)
    ids, sims = brute_force_table(e, 7)

    assert np.array_equal(table.ids, ids)
    assert np.array_equal(table.sims, sims)


@pytest.mark.simindex
def test_select_top_memory():
    n, m = 20000, 50
    block = similarity_block(prepare(_unit_rows(np.random.default_rng(12), n, 8)), 0, BLOCK_ROWS)
    tracemalloc.start()
    try:
        ids, sims = select_top(block, m, offset=0)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()

    # temporaries stay well under the size of the block itself
    assert peak < block.nbytes // 2
    for r in (0, 17, BLOCK_ROWS - 1):
        expected = np.lexsort((np.arange(n), -block[r]))[:m]
        assert np.array_equal(ids[r], expected)
        assert np.array_equal(sims[r], block[r, expected])


@pytest.mark.simindex
def test_neighbor_table_permutation():
    rng = np.random.default_rng(9)
    e = _unit_rows(rng, 200, 6)
    perm = rng.permutation(200)
    table = build_neighbor_table(e, 5)
    permuted = build_neighbor_table(e[perm], 5)

    for new_id, old_id in enumerate(perm):
        assert np.array_equal(perm[permuted.ids[new_id]], table.ids[old_id])
        assert np.allclose(permuted.sims[new_id], table.sims[old_id], atol=1e-6)


@pytest.mark.simindex
@pytest.mark.xfail(strict=True)
def test_neighbor_table_is_symmetric():
    angles = np.radians([0.0, 10.0, 25.0])
    table = build_neighbor_table(np.stack([np.cos(angles), np.sin(angles)], axis=1), 1)
    for i in range(table.n):
        for j in table.ids[i]:
            assert i in table.ids[j]


@pytest.mark.simindex
def test_neighbor_table_errors():
    with pytest.raises(NeighborCountError):
        build_neighbor_table(np.eye(3), 3)
    with pytest.raises(NonFiniteError):
        build_neighbor_table(np.array([[1.0, 0.0], [np.inf, 0.0], [0.0, 1.0]]), 1)
    with pytest.raises(ZeroVectorError):
        build_neighbor_table(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]), 1)


@pytest.mark.simindex
def test_neighbor_table_file(tmp_path):
    table = build_neighbor_table(_unit_rows(np.random.default_rng(1), 30, 4), 4)
    path = str(tmp_path / 't.bin')
    save_table(path, table)
    loaded = load_table(path)

    assert loaded == table
    assert loaded.checksum() == table.checksum()
    with io.open(path, 'r+b') as f:
        f.write(b'XXXX')
    with pytest.raises(FormatError):
        load_table(path)


@pytest.mark.simindex
def test_search():
    dictionary = np.eye(3)
    ids, sims = search(dictionary, np.array([[0.0, 1.0, 0.1], [1.0, 0.0, 0.0]]), 2)

    assert ids.tolist() == [[1, 2], [0, 1]]
    assert ids.shape == sims.shape


@pytest.mark.mining
def test_sample_anchors_pair():
    vocab = Vocabulary(['a', 'b'], ['C', 'C'])
    anchors = sample_anchors(vocab, concept_clusters(vocab), 2, np.random.default_rng(0))

    assert sorted(anchors) == [0, 1]


@pytest.mark.mining
def test_sample_anchors_skips_singletons():
    vocab = Vocabulary(['x', 'a', 'b'], ['S', 'C', 'C'])
    clusters = concept_clusters(vocab)
    rng = np.random.default_rng(0)
    drawn = np.concatenate([sample_anchors(vocab, clusters, 1, rng) for _ in range(10000)])

    assert 0 not in drawn
    assert set(drawn) == {1, 2}


@pytest.mark.mining
def test_sample_anchors_errors():
    vocab = Vocabulary(['x', 'y'], ['S', 'T'])
    with pytest.raises(NoMultiTermConceptError):
        sample_anchors(vocab, concept_clusters(vocab), 1, np.random.default_rng(0))


@pytest.mark.mining
def test_sample_anchors_deterministic(small_vocab):
    vocab, clusters = small_vocab
    a = sample_anchors(vocab, clusters, 16, np.random.default_rng(5))
    b = sample_anchors(vocab, clusters, 16, np.random.default_rng(5))

    assert np.array_equal(a, b)
    assert len(set(a)) == 16


@pytest.mark.mining
def test_sample_positives():
    clusters = ClusterMap({'C': np.array([0, 1, 2]), 'D': np.array([3, 4])}, 5)
    rng = np.random.default_rng(0)

    assert sorted(sample_positives(clusters, 1, 2, rng)) == [0, 2]
    assert list(sample_positives(clusters, 3, 3, rng)) == [4, 4, 4]

    big = ClusterMap({'C': np.arange(31)}, 31)
    assert sorted(sample_positives(big, 0, 30, rng)) == list(range(1, 31))

    with pytest.raises(SingletonConceptError):
        sample_positives(ClusterMap({'S': np.array([0]), 'C': np.array([1, 2])}, 3), 0, 1, rng)


@pytest.mark.mining
def test_hard_negatives():
    table = NeighborTable(np.array([[1, 2], [0, 2], [0, 1]]),
                          np.array([[0.99, 0.40], [0.99, 0.2], [0.40, 0.2]], dtype=np.float32))

    assert list(hard_negatives(table, 0, 2)) == [1, 2]
    assert list(hard_negatives(table, 0, 1)) == [1]
    with pytest.raises(NeighborCountError):
        hard_negatives(table, 0, 3)


@pytest.mark.mining
def test_hard_negatives_follow_refresh():
    rng = np.random.default_rng(2)
    e = _unit_rows(rng, 40, 4)
    before = build_neighbor_table(e, 3)
    e[7] = e[30]
    after = build_neighbor_table(e, 3)

    assert list(hard_negatives(after, 30, 3)) == list(after.ids[30])
    assert hard_negatives(after, 30, 1)[0] == 7
    assert list(hard_negatives(before, 30, 3)) == list(before.ids[30])


@pytest.mark.mining
@pytest.mark.parametrize('b,k,m', [(16, 30, 30), (1, 1, 1), (3, 2, 0)])
def test_build_minibatch(small_vocab, b, k, m):
    vocab, clusters = small_vocab
    table = build_neighbor_table(_unit_rows(np.random.default_rng(0), vocab.n, 8), 30)
    batch = build_minibatch(vocab, clusters, table, b, k, m, np.random.default_rng(4))

    assert isinstance(batch, MiniBatch)
    assert len(batch) == b * (1 + k + m)
    assert len(batch.surfaces) == len(batch)
    for i in range(b):
        block = batch.term_ids[batch.block(i)]
        labels = batch.labels[batch.block(i)]
        assert np.all(labels[1:1 + k] == labels[0])
        assert list(block[1 + k:]) == list(table.ids[block[0], :m])
        assert batch.surfaces[i * batch.block_size] == vocab.surface_of(block[0])


@pytest.mark.mining
def test_build_minibatch_replay(small_vocab):
    vocab, clusters = small_vocab
    table = build_neighbor_table(_unit_rows(np.random.default_rng(0), vocab.n, 8), 5)
    a = build_minibatch(vocab, clusters, table, 4, 3, 5, np.random.default_rng(9))
    b = build_minibatch(vocab, clusters, table, 4, 3, 5, np.random.default_rng(9))

    assert np.array_equal(a.term_ids, b.term_ids)
    assert np.array_equal(a.labels, b.labels)


@pytest.mark.mining
def test_hard_negative_same_concept_fraction():
    table, clusters = _four_term_instance()

    assert hard_negative_same_concept_fraction(table, clusters, 1) == 1.0
    assert hard_negative_same_concept_fraction(table, clusters) == pytest.approx(1.0 / 3.0)


@pytest.mark.msloss
def test_pairwise_sims():
    rng = np.random.default_rng(0)
    e = _unit_rows(rng, 8, 16)
    s = pairwise_sims(e)
    for i in range(8):
        for j in range(8):
            assert s[i, j] == pytest.approx(sum(e[i, d] * e[j, d] for d in range(16)), abs=1e-6)

    assert np.allclose(pairwise_sims(np.eye(4)), np.eye(4))
    dup = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert pairwise_sims(dup)[0, 1] == 1.0


def _three_entry_sims(s02):
    return np.array([[1.0, 0.9, s02],
                     [0.9, 1.0, 0.1],
                     [s02, 0.1, 1.0]])


@pytest.mark.msloss
def test_mine_pairs():
    labels = np.array([0, 0, 1])
    pairs = mine_pairs(_three_entry_sims(0.2), labels, 0.1)

    assert list(pairs.N(0)) == []
    assert list(pairs.P(0)) == []

    pairs = mine_pairs(_three_entry_sims(0.85), labels, 0.1)
    assert list(pairs.N(0)) == [2]
    assert list(pairs.P(0)) == [1]

    pairs = mine_pairs(np.ones((4, 4)), np.zeros(4), 0.1)
    assert pairs.empty


@pytest.mark.msloss
def test_ms_loss_empty_sets():
    hyper = LossHyper()
    s = np.ones((4, 4))

    assert ms_loss(s, np.zeros(4), hyper) == 0.0
    assert np.array_equal(ms_loss_grad(s, np.zeros(4), hyper), np.zeros((4, 4)))


@pytest.mark.msloss
def test_ms_loss_single_positive():
    hyper = LossHyper(alpha=2.0, beta=50.0, lambda_=1.0)
    positive = np.zeros((2, 2), dtype=bool)
    positive[0, 1] = True
    pairs = MinedPairs(positive, np.zeros((2, 2), dtype=bool))
    loss, _ = ms_loss_and_grad(np.ones((2, 2)), np.zeros(2), hyper, pairs)

    assert loss == pytest.approx(np.log(2.0) / hyper.alpha / loss_denominator(2))


def _reference_pairs(s, labels, epsilon):
    """
    Mined index lists of every row, by the rule applied entry by entry.
    """
    size = len(labels)
    positives, negatives = [], []
    for i in range(size):
        pos = [j for j in range(size) if j != i and labels[j] == labels[i]]
        neg = [j for j in range(size) if labels[j] != labels[i]]
        min_pos = min((float(s[i, j]) for j in pos), default=float('inf'))
        max_neg = max((float(s[i, j]) for j in neg), default=float('-inf'))
        negatives.append([j for j in neg if float(s[i, j]) > min_pos - epsilon])
        positives.append([j for j in pos if float(s[i, j]) < max_neg + epsilon])
    return positives, negatives


def _decimal_ms_loss(s, positives, negatives, hyper):
    getcontext().prec = 50
    alpha = Decimal(hyper.alpha)
    beta = Decimal(hyper.beta)
    lam = Decimal(hyper.lambda_)
    total = Decimal(0)
    for i in range(s.shape[0]):
        pos = sum(((-alpha) * (Decimal(float(s[i, j])) - lam)).exp() for j in positives[i])
        neg = sum((beta * (Decimal(float(s[i, j])) - lam)).exp() for j in negatives[i])
        total += (1 + Decimal(pos)).ln() / alpha + (1 + Decimal(neg)).ln() / beta
    return total / Decimal(loss_denominator(s.shape[0]))


def _random_loss_batch(rng):
    """
    Similarities of 8..64 random unit vectors with 2..8 labels, each used at least once.
    """
    size = int(rng.integers(8, 65))
    label_count = int(rng.integers(2, 9))
    labels = rng.permutation(np.concatenate([np.arange(label_count),
                                             rng.integers(0, label_count, size - label_count)]))
    return pairwise_sims(_unit_rows(rng, size, int(rng.integers(3, 17)))), labels


LOSS_HYPERS = [LossHyper(alpha=2.0, beta=50.0, lambda_=0.5, epsilon=0.1),
               LossHyper(alpha=2.0, beta=40.0, lambda_=1.0, epsilon=0.1),
               LossHyper(alpha=1.0, beta=10.0, lambda_=0.5, epsilon=0.3)]


@pytest.mark.msloss
@pytest.mark.timeout(300)
def test_ms_loss_high_precision():
    rng = np.random.default_rng(20)
    for batch in range(100):
        s, labels = _random_loss_batch(rng)
        hyper = LOSS_HYPERS[batch % len(LOSS_HYPERS)]
        positives, negatives = _reference_pairs(s, labels, hyper.epsilon)
        pairs = mine_pairs(s, labels, hyper.epsilon)
        for i in range(len(labels)):
            assert list(pairs.P(i)) == positives[i]
            assert list(pairs.N(i)) == negatives[i]
        expected = float(_decimal_ms_loss(s, positives, negatives, hyper))
        loss = ms_loss(s, labels, hyper)

        assert loss >= 0.0
        assert abs(loss - expected) <= 1e-10 * max(abs(expected), 1e-300)


def _same_pairs(a, b):
    return np.array_equal(a.positive, b.positive) and np.array_equal(a.negative, b.negative)


@pytest.mark.msloss
@pytest.mark.timeout(300)
def test_ms_loss_grad_finite_differences():
    rng = np.random.default_rng(21)
    h = 1e-6
    checked = 0
    for batch in range(100):
        s, labels = _random_loss_batch(rng)
        hyper = LOSS_HYPERS[batch % len(LOSS_HYPERS)]
        pairs = mine_pairs(s, labels, hyper.epsilon)
        _, analytic = ms_loss_and_grad(s, labels, hyper, pairs)

        assert np.all(analytic[pairs.positive] <= 0.0)
        assert np.all(analytic[pairs.negative] >= 0.0)
        assert np.all(analytic[~(pairs.positive | pairs.negative)] == 0.0)

        # entries of mined pairs first, then random entries
        mined = np.argwhere(pairs.positive | pairs.negative)
        picks = [tuple(p) for p in mined[rng.permutation(len(mined))[:20]]]
        picks += [tuple(p) for p in rng.integers(0, len(labels), size=(10, 2))]
        for i, j in picks:
            plus = s.copy()
            plus[i, j] += h
            minus = s.copy()
            minus[i, j] -= h
            if not (_same_pairs(mine_pairs(plus, labels, hyper.epsilon), pairs) and
                    _same_pairs(mine_pairs(minus, labels, hyper.epsilon), pairs)):
                # the step crosses a mining boundary
                continue
            numeric = (ms_loss_and_grad(plus, labels, hyper, pairs)[0]
                       - ms_loss_and_grad(minus, labels, hyper, pairs)[0]) / (2 * h)
            assert abs(numeric - analytic[i, j]) <= 1e-4 * max(abs(analytic[i, j]), 1e-3)
            checked += 1

    assert checked >= 1500


@pytest.mark.msloss
def test_backprop_to_embeddings():
    e = _unit_rows(np.random.default_rng(0), 5, 3)
    assert np.array_equal(backprop_to_embeddings(np.zeros((5, 5)), e), np.zeros((5, 3)))

    g = np.zeros((5, 5))
    g[1, 3] = 0.7
    grad = backprop_to_embeddings(g, e)
    touched = np.flatnonzero(np.any(grad != 0, axis=1))
    assert list(touched) == [1, 3]


@pytest.mark.msloss
def test_end_to_end_gradient():
    rng = np.random.default_rng(12)
    params = EncoderParams(rng.normal(size=(32, 6)), 2, 3, hash_seed=4)
    surfaces = ['type 1 diabetes', 'diabetes type 1', 't1d', 'type 2 diabetes', 'diabetes type 2', 't2d']
    labels = np.array([0, 0, 0, 1, 1, 1])
    hyper = LossHyper(alpha=2.0, beta=10.0, lambda_=0.5, epsilon=2.0)

    def loss_of(pairs):
        return ms_loss_and_grad(pairwise_sims(params.encode_batch(surfaces)), labels, hyper, pairs)[0]

    e = params.encode_batch(surfaces)
    pairs = mine_pairs(pairwise_sims(e), labels, hyper.epsilon)
    _, grad_s = ms_loss_and_grad(pairwise_sims(e), labels, hyper, pairs)
    analytic = _dense(params.encode_batch_grad(surfaces, backprop_to_embeddings(grad_s, e)),
                      params.table.shape)
    h = 1e-5
    numeric = np.zeros_like(params.table)
    for r in range(params.bucket_count):
        for c in range(params.dim):
            saved = params.table[r, c]
            params.table[r, c] = saved + h
            plus = loss_of(pairs)
            params.table[r, c] = saved - h
            minus = loss_of(pairs)
            params.table[r, c] = saved
            numeric[r, c] = (plus - minus) / (2 * h)

    assert not pairs.empty
    assert np.allclose(analytic, numeric, rtol=1e-3, atol=1e-8)


@pytest.mark.msloss
def test_loss_hyper_validation():
    for kwargs in ({'alpha': 0.0}, {'beta': -1.0}, {'epsilon': -0.1}):
        with pytest.raises(ConfigError):
            LossHyper(**kwargs).validate()


@pytest.mark.trainer
def test_lr_schedule():
    cfg = TrainConfig(peak_lr=0.01, warmup_steps=100, total_steps=1100)

    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(0.01)
    assert lr_at(600, cfg) == pytest.approx(0.005)
    assert lr_at(1100, cfg) == 0.0


@pytest.mark.trainer
def test_adamw_zero_gradient():
    params = init_params(bucket_count=16, dim=4, seed=1)
    before = params.table.copy()
    state = OptimizerState.zeros_like(params.table)
    adamw_step(params, SparseRows(np.array([3]), np.zeros((1, 4))), state, 0.1, TrainConfig())

    assert np.array_equal(params.table, before)
    assert state.step == 1


@pytest.mark.trainer
def test_adamw_single_step():
    params = EncoderParams(np.zeros((8, 3)))
    g = np.array([[0.5, -2.0, 1e-3]])
    cfg = TrainConfig(adam_beta1=0.0, adam_beta2=0.0, weight_decay=0.0, adam_eps=1e-8)
    state = OptimizerState.zeros_like(params.table)
    adamw_step(params, SparseRows(np.array([5]), g), state, 0.1, cfg)

    assert np.allclose(params.table[5], -0.1 * g[0] / (np.abs(g[0]) + 1e-8))
    assert np.all(np.delete(params.table, 5, axis=0) == 0.0)


@pytest.mark.trainer
def test_adamw_non_finite():
    params = init_params(bucket_count=8, dim=2)
    with pytest.raises(NonFiniteError):
        adamw_step(params, SparseRows(np.array([0]), np.array([[np.nan, 0.0]])),
                   OptimizerState.zeros_like(params.table), 0.1, TrainConfig())


@pytest.mark.trainer
def test_accumulate():
    a = SparseRows(np.array([1, 4]), np.array([[1.0, 1.0], [2.0, 2.0]]))
    b = SparseRows(np.array([4, 7]), np.array([[4.0, 0.0], [6.0, 6.0]]))
    merged = accumulate([a, b])

    assert list(merged.rows) == [1, 4, 7]
    assert np.array_equal(merged.values, [[0.5, 0.5], [3.0, 1.0], [3.0, 3.0]])


@pytest.mark.trainer
@pytest.mark.parametrize(
    'kwargs',
    [
        {'warmup_steps': 30000},
        {'refresh_interval_steps': 700},
        {'b': 0},
        {'positive_mode': 'two-positives'},
        {'peak_lr': 0.0},
        {'bucket_count': 1000},
        {'bucket_count': 3},
    ]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


@pytest.mark.trainer
def test_train_config_dict():
    cfg = TrainConfig(refresh_interval_steps=None, loss_hyper=LossHyper(lambda_=0.5))
    d = json.loads(json.dumps(cfg.to_dict()))

    assert d['refresh_interval_steps'] == 'never'
    assert TrainConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'gamma': 1})


@pytest.mark.trainer
def test_ablation_config():
    cfg = TrainConfig()

    assert ablation_config(cfg, 'a').effective_k == 1
    assert ablation_config(cfg, 'a').refresh_interval_steps is None
    assert ablation_config(cfg, 'b').effective_k == cfg.k
    assert ablation_config(cfg, 'b').refresh_interval_steps is None
    assert ablation_config(cfg, 'c').refresh_interval_steps == cfg.refresh_interval_steps
    with pytest.raises(ConfigError):
        ablation_config(cfg, 'd')


@pytest.mark.trainer
def test_train_zero_steps(small_vocab):
    vocab, clusters = small_vocab
    params = init_params(bucket_count=512, dim=8, seed=2)
    before = params.table.copy()
    trained, metrics = train(vocab, clusters, TrainConfig(total_steps=0, warmup_steps=0), params=params)

    assert np.array_equal(trained.table, before)
    assert metrics == []


@pytest.mark.trainer
def test_trainer_not_started(small_vocab, small_config):
    vocab, clusters = small_vocab
    trainer = Trainer(vocab, clusters, small_config)
    with pytest.raises(TrainerIsNotStartedError):
        trainer.iter_run()


@pytest.mark.trainer
def test_trainer_m_too_large():
    vocab = Vocabulary(['a', 'b', 'c'], ['C', 'C', 'D'])
    cfg = TrainConfig(m=5, total_steps=2, warmup_steps=1, bucket_count=64, dim=4)
    with pytest.raises(ConfigError):
        Trainer(vocab, concept_clusters(vocab), cfg).start()


@pytest.mark.trainer
@pytest.mark.timeout(60)
def test_train_deterministic(small_vocab, small_config):
    vocab, clusters = small_vocab
    first, metrics1 = train(vocab, clusters, small_config)
    second, metrics2 = train(vocab, clusters, small_config)
    threaded, _ = train(vocab, clusters, TrainConfig(**dict(vars(small_config), threads=3)))

    assert np.array_equal(first.table, second.table)
    assert np.array_equal(first.table, threaded.table)
    assert metrics1 == metrics2
    assert len(metrics1) == small_config.total_steps
    assert all(np.isfinite(r['loss']) and np.isfinite(r['probe_loss']) for r in metrics1)


@pytest.mark.trainer
@pytest.mark.timeout(60)
def test_trainer_refresh(small_vocab, small_config):
    vocab, clusters = small_vocab
    trainer = Trainer(vocab, clusters, small_config).start()
    checksums = {0: trainer.table.checksum()}
    counts = {}
    expected = {}
    for record in trainer.iter_run():
        counts[record['step']] = record['refresh_count']
        checksums[record['step']] = trainer.table.checksum()
        expected[record['step']] = build_neighbor_table(
            trainer.params.encode_batch(vocab.surfaces), small_config.m).checksum()

    assert counts == {1: 0, 2: 0, 3: 1, 4: 1, 5: 2, 6: 2}
    assert checksums[1] == checksums[2] == checksums[0]
    # the table used from step 3 on is built from the parameters after step 2
    assert checksums[3] == checksums[4] == expected[2]
    assert checksums[5] == checksums[6] == expected[4]
    assert checksums[3] != checksums[2]


@pytest.mark.trainer
@pytest.mark.timeout(60)
def test_trainer_frozen_table(small_vocab, small_config):
    vocab, clusters = small_vocab
    cfg = TrainConfig(**dict(vars(small_config), refresh_interval_steps=None))
    trainer = Trainer(vocab, clusters, cfg).start()
    initial = trainer.table.checksum()
    records = list(trainer.iter_run())

    assert [r['refresh_count'] for r in records] == [0] * cfg.total_steps
    assert trainer.table.checksum() == initial


@pytest.mark.trainer
@pytest.mark.timeout(60)
def test_train_checkpoint_and_warm_start(tmp_path, small_vocab, small_config):
    vocab, clusters = small_vocab
    path = str(tmp_path / 'p.ckpt')
    metrics_path = str(tmp_path / 'metrics.jsonl')
    params, _ = train(vocab, clusters, small_config, metrics_path=metrics_path, checkpoint_path=path)
    loaded, state = load_checkpoint(path)

    assert np.array_equal(loaded.table, params.table)
    assert state[0] == small_config.total_steps
    with io.open(metrics_path, 'r', encoding='utf-8') as f:
        records = [json.loads(line) for line in f]
    assert [r['step'] for r in records] == list(range(1, small_config.total_steps + 1))

    cfg = TrainConfig(**dict(vars(small_config), total_steps=2, warmup_steps=1, init_checkpoint=path))
    trainer = Trainer(vocab, clusters, cfg).start()
    assert np.array_equal(trainer.params.table, params.table)
    assert trainer.state.step == small_config.total_steps


@pytest.mark.trainer
@pytest.mark.timeout(60)
def test_train_accumulation(small_vocab, small_config):
    vocab, clusters = small_vocab
    cfg = TrainConfig(**dict(vars(small_config), accumulation_steps=3))
    params, metrics = train(vocab, clusters, cfg)

    assert len(metrics) == cfg.total_steps
    assert np.all(np.isfinite(params.table))


@pytest.mark.trainer
def test_accumulation_matches_combined_batch():
    """
    Two micro-batches of 4 entries against one batch of all 8.
    The micro-batches use disjoint embedding dimensions, so every cross
    similarity is 0 while in-batch similarities stay above epsilon; then no
    cross pair is mined and the mean of the micro-batch gradients equals the
    gradient of the combined batch.
    """
    first = ['abac', 'abca', 'cabb', 'bcab']
    second = ['xyzx', 'zyxy', 'yxzz', 'xzyz']
    rng = np.random.default_rng(3)
    for hash_seed in range(20):
        hashing = EncoderParams(np.zeros((2 ** 12, 4)), 3, 3, hash_seed=hash_seed)
        first_rows = set(np.concatenate([hashing.featurize(s) for s in first]).tolist())
        second_rows = set(np.concatenate([hashing.featurize(s) for s in second]).tolist())
        if not first_rows & second_rows:
            break
    assert not first_rows & second_rows
    table = np.zeros((2 ** 12, 4))
    table[sorted(first_rows), :2] = rng.uniform(0.1, 1.0, size=(len(first_rows), 2))
    table[sorted(second_rows), 2:] = rng.uniform(0.1, 1.0, size=(len(second_rows), 2))
    params = EncoderParams(table, 3, 3, hash_seed=hash_seed)
    hyper = LossHyper(alpha=2.0, beta=50.0, lambda_=0.5, epsilon=0.1)

    def batch_of(surfaces, labels):
        return MiniBatch(np.arange(len(surfaces)), surfaces, np.array(labels), len(surfaces) // 2, 1, 0)

    micro = [batch_of(first, [0, 0, 1, 1]), batch_of(second, [2, 2, 3, 3])]
    combined = batch_of(first + second, [0, 0, 1, 1, 2, 2, 3, 3])

    s = pairwise_sims(params.encode_batch(combined.surfaces))
    assert np.all(s[:4, 4:] == 0.0)
    assert s[:4, :4].min() > hyper.epsilon and s[4:, 4:].min() > hyper.epsilon
    pairs = mine_pairs(s, combined.labels, hyper.epsilon)
    assert not np.any(pairs.negative[:4, 4:]) and not np.any(pairs.negative[4:, :4])
    assert not pairs.empty

    parts = [batch_gradient(params, batch, hyper) for batch in micro]
    loss, grad = batch_gradient(params, combined, hyper)
    mean = accumulate([g for _, g in parts])

    assert loss == pytest.approx(np.mean([l for l, _ in parts]), rel=1e-12)
    assert np.allclose(_dense(mean, table.shape), _dense(grad, table.shape), rtol=1e-10, atol=1e-15)
    assert np.any(_dense(grad, table.shape) != 0.0)


@pytest.mark.clustereval
def test_predict_pairs_asymmetric():
    ids = np.array([[1], [2], [1], [4], [3]])
    sims = np.array([[0.9], [0.95], [0.95], [0.1], [0.1]], dtype=np.float32)
    pairs = predict_pairs(NeighborTable(ids, sims), 0.8)

    assert sorted(pairs) == [(0, 1), (1, 2)]
    assert (1, 0) in pairs
    assert (0, 2) not in pairs


@pytest.mark.clustereval
def test_predict_pairs_extremes():
    e = _unit_rows(np.random.default_rng(0), 10, 4)
    table = build_neighbor_table(e, 9)

    assert len(predict_pairs(table, 1.0)) == 0
    assert len(predict_pairs(table, -1.0)) == pair_count(10)


@pytest.mark.clustereval
def test_predict_pairs_relabel():
    rng = np.random.default_rng(5)
    e = _unit_rows(rng, 60, 3)
    perm = rng.permutation(60)
    pairs = predict_pairs(build_neighbor_table(e, 4), 0.9)
    permuted = predict_pairs(build_neighbor_table(e[perm], 4), 0.9)
    mapped = {tuple(sorted((int(perm[i]), int(perm[j])))) for i, j in permuted}

    assert mapped == set(pairs)


@pytest.mark.clustereval
def test_report_conventions():
    empty = EvalReport.from_counts(0.5, 0, 0, 0, 10)
    report = EvalReport.from_counts(0.5, 3, 1, 2, 4)

    assert empty.precision == empty.recall == empty.f1 == 0.0
    assert report.precision == 0.75
    assert report.recall == 0.6
    assert report.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert report.to_dict()['tn'] == 4


@pytest.mark.clustereval
def test_evaluate_four_terms():
    table, clusters = _four_term_instance()
    report = evaluate(table, clusters, 0.6)

    assert (report.tp, report.fp, report.fn, report.tn) == (1, 0, 1, 4)
    assert report.precision == 1.0
    assert report.recall == 0.5
    assert report.f1 == pytest.approx(2.0 / 3.0)

    report = evaluate(table, clusters, 0.99)
    assert (report.tp, report.fp, report.fn, report.tn) == (0, 0, 2, 4)
    assert report.precision == report.recall == report.f1 == 0.0


@pytest.mark.clustereval
@pytest.mark.parametrize('same', [True, False])
def test_evaluate_two_terms(same):
    e = np.array([[1.0, 0.0], [0.6, 0.8]])
    vocab = Vocabulary(['a', 'b'], ['C', 'C'] if same else ['C', 'D'])
    report = evaluate(build_neighbor_table(e, 1), concept_clusters(vocab), 0.5)

    assert report.total == 1
    if same:
        assert (report.tp, report.fp, report.fn, report.tn) == (1, 0, 0, 0)
    else:
        assert (report.tp, report.fp, report.fn, report.tn) == (0, 1, 0, 0)


@pytest.mark.clustereval
@pytest.mark.parametrize(
    'seed,m,threads',
    [
        (0, 5, 1),
        (1, 10, 4),
        (2, 1, 1),
        (3, 30, 2),
    ]
)
def test_evaluate_brute_force(seed, m, threads):
    e, clusters = _clustered_embeddings(np.random.default_rng(seed), 60, 5, 16, 0.35)
    table = build_neighbor_table(e, m, threads=threads)
    grid = [round(0.5 + 0.02 * i, 2) for i in range(25)]
    reports, _ = sweep(table, clusters, grid, threads=threads)

    for report in reports:
        expected = brute_force_evaluate(e, clusters, report.theta, m)
        assert report == expected
        assert report.total == pair_count(300)


def _random_partition_instance(rng, n):
    """
    n embeddings in randomly sized clusters (1..20 terms), terms of a cluster
    scattered over the id range. Return (embeddings, clusters).
    """
    sizes = []
    while sum(sizes) < n:
        sizes.append(int(rng.integers(1, 21)))
    sizes[-1] -= sum(sizes) - n
    labels = rng.permutation(np.repeat(np.arange(len(sizes)), sizes))
    dim = int(rng.choice([4, 8, 16]))
    centers = _unit_rows(rng, len(sizes), dim)
    e = centers[labels] + rng.uniform(0.1, 0.8) * rng.normal(size=(n, dim))
    vocab = Vocabulary(['t%d' % i for i in range(n)], ['C%d' % c for c in labels])
    return e, concept_clusters(vocab)


@pytest.mark.clustereval
@pytest.mark.timeout(600)
@pytest.mark.parametrize('n,instances', [(50, 150), (500, 40), (2000, 10)])
def test_sweep_matches_pair_enumeration(n, instances):
    rng = np.random.default_rng(n)
    grid = [round(0.5 + 0.02 * i, 2) for i in range(25)]
    total = pair_count(n)
    for instance in range(instances):
        e, clusters = _random_partition_instance(rng, n)
        assert clusters.sizes.max() <= 20
        predicted_by_m = []
        for m in (1, 5, 30, n - 1):
            threads = 1 + instance % 3
            reports, best = sweep(build_neighbor_table(e, m, threads=threads), clusters, grid, threads=threads)
            expected = brute_force_sweep(e, clusters, grid, m)

            assert reports == expected
            assert all(r.tp + r.fp + r.fn + r.tn == total for r in reports)
            assert all(r.tp + r.fn == clusters.positive_pair_count for r in reports)
            assert best == max(expected, key=lambda r: (r.f1, r.theta)).theta
            predicted = [r.tp + r.fp for r in reports]
            assert all(b <= a for a, b in zip(predicted, predicted[1:]))
            assert all(b.tp <= a.tp for a, b in zip(reports, reports[1:]))
            predicted_by_m.append(predicted)
        # a longer table only adds stored pairs
        for shorter, longer in zip(predicted_by_m, predicted_by_m[1:]):
            assert all(a <= b for a, b in zip(shorter, longer))


@pytest.mark.clustereval
def test_oversized_cluster_warns(caplog):
    table, clusters = _four_term_instance()
    with caplog.at_level(logging.WARNING, logger='termclust.clustereval'):
        report = evaluate(table, clusters, 0.3, budget=3)

    assert report.tp == 2
    assert any('largest cluster' in r.getMessage() for r in caplog.records)


@pytest.mark.clustereval
def test_sweep_full_recall():
    e, clusters = _clustered_embeddings(np.random.default_rng(1), 10, 3, 8, 0.5)
    reports, best = sweep(build_neighbor_table(e, 29), clusters, [-1.0])

    assert reports[0].recall == 1.0
    assert reports[0].tp + reports[0].fp == pair_count(30)
    assert best == -1.0


@pytest.mark.clustereval
def test_sweep_best_theta():
    table, clusters = _four_term_instance()
    reports, best = sweep(table, clusters, [0.3, 0.6, 0.7, 0.95])

    assert [r.tp for r in reports] == [2, 1, 1, 0]
    assert best == 0.3

    _, best = sweep(table, clusters, [0.6, 0.7])
    assert best == 0.7


@pytest.mark.clustereval
def test_sweep_monotonic_recall():
    e, clusters = _clustered_embeddings(np.random.default_rng(4), 40, 4, 12, 0.4)
    reports, _ = sweep(build_neighbor_table(e, 8), clusters)
    recalls = [r.recall for r in reports]

    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


@pytest.mark.clustereval
@pytest.mark.timeout(60)
def test_evaluate_scale():
    e, clusters = _clustered_embeddings(np.random.default_rng(7), 2000, 5, 32, 0.3)
    table = build_neighbor_table(e, 10, threads=4)
    reports, best = sweep(table, clusters, threads=4)

    assert len(reports) == 50
    assert all(r.total == pair_count(10000) for r in reports)
    assert 0.5 <= best <= 0.99


@pytest.mark.clustereval
def test_brute_force_guard():
    e, clusters = _clustered_embeddings(np.random.default_rng(0), 3, 2, 4, 0.1)
    with pytest.raises(GuardError):
        brute_force_evaluate(e, clusters, 0.5, 2, max_n=5)


@pytest.mark.clustereval
def test_stored_pairs_keeps_larger_similarity():
    ids = np.array([[1], [0], [1]])
    sims = np.array([[0.7], [0.9], [0.2]], dtype=np.float32)
    stored = StoredPairs(NeighborTable(ids, sims))

    assert list(stored.keys) == [1, 5]
    assert stored.lookup(np.array([1, 5, 2]))[0] == pytest.approx(0.9)
    assert stored.lookup(np.array([2]))[0] == -np.inf


@pytest.mark.clustereval
@pytest.mark.parametrize(
    'pairs,expected',
    [
        ([(1, 2), (2, 3)], [0, 1, 1, 1, 4]),
        ([], [0, 1, 2, 3, 4]),
        ([(i, j) for i in range(5) for j in range(i + 1, 5)], [0, 0, 0, 0, 0]),
    ]
)
def test_connected_components(pairs, expected):
    assert list(connected_components(pairs, 5)) == expected


@pytest.mark.clustereval
def test_linking_accuracy():
    queries = [(np.array([1.0, 0.0, 0.0]), 'A'),
               (np.array([0.0, 1.0, 0.0]), 'C'),
               (np.array([0.0, 0.0, 1.0]), 'Z')]
    accuracy = linking_accuracy(np.eye(3), ['A', 'B', 'C'], queries, ks=(1, 5))

    assert accuracy[1] == pytest.approx(1.0 / 3.0)
    assert accuracy[5] == pytest.approx(2.0 / 3.0)


@pytest.mark.clustereval
def test_linking_accuracy_exact_surfaces():
    vocab, _ = synth_vocabulary(SynthSpec(concept_count=300, rng_seed=5))
    first = {}
    for _, surface, concept_id in vocab.terms():
        first.setdefault(surface, concept_id)
    surfaces = list(first)
    params = init_params(bucket_count=2 ** 14, dim=32, seed=8)
    dictionary = params.encode_batch(surfaces)
    picks = np.random.default_rng(1).choice(len(surfaces), size=200, replace=False)
    queries = [(params.encode(surfaces[i]), first[surfaces[i]]) for i in picks]
    accuracy = linking_accuracy(dictionary, [first[s] for s in surfaces], queries, ks=(1, 5), threads=2)

    assert accuracy == {1: 1.0, 5: 1.0}


@pytest.mark.clustereval
def test_linking_accuracy_random_monotonic():
    rng = np.random.default_rng(14)
    dictionary = rng.normal(size=(200, 8))
    concepts = ['C%d' % c for c in rng.integers(0, 30, size=200)]
    gold = [concepts[i] for i in rng.integers(0, 200, size=100)]
    query_matrix = rng.normal(size=(100, 8))
    ks = (1, 2, 5, 10, 50, 200)
    accuracy = linking_accuracy(dictionary, concepts, list(zip(query_matrix, gold)), ks=ks)

    values = [accuracy[k] for k in ks]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert accuracy[200] == 1.0
    sims = prepare(query_matrix) @ prepare(dictionary).T
    for k in ks:
        hits = 0
        for q in range(100):
            order = np.lexsort((np.arange(200), -sims[q]))[:k]
            hits += gold[q] in [concepts[i] for i in order]
        assert accuracy[k] == pytest.approx(hits / 100.0)


@pytest.mark.clustereval
def test_probe_pairs():
    params = init_params(bucket_count=256, dim=8, seed=1)
    report = probe_pairs(params, [('headache', 'headache', True), ('headache', 'pink urine', None)])

    assert report[0]['similarity'] == pytest.approx(1.0, abs=1e-6)
    assert report[1]['same_concept'] is None
    assert -1.0 <= report[1]['similarity'] <= 1.0


@pytest.mark.clustereval
def test_sweep_csv(tmp_path):
    table, clusters = _four_term_instance()
    reports, _ = sweep(table, clusters, [0.6, 0.99])
    path = str(tmp_path / 's.csv')
    write_sweep_csv(path, reports)
    rows = read_sweep_csv(path)

    assert [r['theta'] for r in rows] == [0.6, 0.99]
    assert rows[0]['f1'] == pytest.approx(2.0 / 3.0, abs=1e-6)


@pytest.mark.shard_pool
@pytest.mark.timeout(5)
def test_shard_pool_map():
    with ShardPool(4) as pool:
        assert pool.map(lambda x: x * x, range(20)) == [x * x for x in range(20)]
    assert run_shards(lambda x: -x, [3, 1, 2], threads=1) == [-3, -1, -2]


@pytest.mark.shard_pool
@pytest.mark.timeout(5)
def test_shard_pool_errors():
    def shard(x):
        if x in (3, 5):
            raise ValueError(x)
        return x

    with pytest.raises(ValueError) as info:
        run_shards(shard, range(8), threads=3)
    assert info.value.args == (3,)

    pool = ShardPool(2)
    with pytest.raises(ShardPoolNotAliveError):
        pool.map(shard, [0, 1])
    pool.start()
    with pytest.raises(ShardPoolAlreadyStartedError):
        pool.start()
    assert pool.stop()
    with pytest.raises(ShardPoolAlreadyStoppedError):
        pool.stop()


def _cli(*argv):
    return main(list(argv) + ['--log-level', 'WARNING'])


@pytest.fixture
def pipeline(tmp_path):
    """
    synth -> train -> embed -> index over a small synthetic vocabulary.
    """
    paths = {name: str(tmp_path / name) for name in ('vocab.tsv', 'p.ckpt', 'e.bin', 't.bin')}
    assert _cli('synth', '--concepts', '25', '--seed', '5', '-o', paths['vocab.tsv']) == 0
    assert _cli('train', paths['vocab.tsv'],
                '--steps', '4', '--warmup', '1', '--b', '3', '--k', '2', '--m', '4',
                '--refresh-steps', '2', '--log-interval', '1', '--buckets', '1024', '--dim', '16',
                '-o', paths['p.ckpt']) == 0
    assert _cli('embed', paths['p.ckpt'], paths['vocab.tsv'], '-o', paths['e.bin']) == 0
    assert _cli('index', paths['e.bin'], '--m', '5', '-o', paths['t.bin']) == 0
    return paths


@pytest.mark.cli
@pytest.mark.timeout(60)
def test_cli_pipeline(tmp_path, pipeline):
    vocab = load_vocabulary(pipeline['vocab.tsv'])

    for name in ('vocab.tsv', 'p.ckpt', 'e.bin', 't.bin'):
        assert os.path.exists(pipeline[name] + '.manifest.json')
    assert os.path.exists(pipeline['p.ckpt'] + '.metrics.jsonl')
    assert load_table(pipeline['t.bin']).n == vocab.n
    assert load_embeddings(pipeline['e.bin']).shape == (vocab.n, 16)

    report = str(tmp_path / 'report.json')
    csv_path = str(tmp_path / 'sweep.csv')
    assert _cli('sweep', pipeline['t.bin'], pipeline['vocab.tsv'], '--grid', '0.5:0.9:0.1',
                '-o', report, '--csv', csv_path) == 0
    with io.open(report, 'r', encoding='utf-8') as f:
        assert [r['theta'] for r in json.load(f)] == [0.5, 0.6, 0.7, 0.8, 0.9]
    assert len(read_sweep_csv(csv_path)) == 5

    single = str(tmp_path / 'eval.json')
    assert _cli('eval', pipeline['t.bin'], pipeline['vocab.tsv'], '--theta', '0.7', '-o', single) == 0
    with io.open(single, 'r', encoding='utf-8') as f:
        assert json.load(f)['theta'] == 0.7

    clusters_path = str(tmp_path / 'clusters.tsv')
    assert _cli('cluster', pipeline['t.bin'], pipeline['vocab.tsv'], '--theta', '0.7', '-o', clusters_path) == 0
    with io.open(clusters_path, 'r', encoding='utf-8') as f:
        rows = [line.rstrip('\n').split('\t') for line in f]
    assert len(rows) == vocab.n
    assert [int(r[0]) for r in rows] == list(range(vocab.n))
    assert all(int(r[1]) <= int(r[0]) for r in rows)
    assert [r[2] for r in rows] == list(vocab.surfaces)


@pytest.mark.cli
@pytest.mark.timeout(60)
def test_cli_link_and_probe(tmp_path, pipeline):
    vocab = load_vocabulary(pipeline['vocab.tsv'])
    unique = [i for i in range(vocab.n) if vocab.surfaces.count(vocab.surface_of(i)) == 1]
    queries = _write(tmp_path / 'q.tsv', ''.join('%s\t%s\n' % (vocab.concept_of(i), vocab.surface_of(i))
                                               for i in unique[::3]))
    out = str(tmp_path / 'link.json')
    assert _cli('link', pipeline['p.ckpt'], pipeline['vocab.tsv'], queries, '-o', out) == 0
    with io.open(out, 'r', encoding='utf-8') as f:
        accuracy = json.load(f)
    # every query is a dictionary surface held by one term only
    assert accuracy == {'acc@1': 1.0, 'acc@5': 1.0}

    assert _cli('link', pipeline['p.ckpt'], pipeline['vocab.tsv'], queries) == 0
    assert os.path.exists(pipeline['p.ckpt'] + '.link.manifest.json')

    pairs = _write(tmp_path / 'pairs.tsv', 'Headache\tcephalgia\tT\nheadache\tpink urine\tF\n')
    out = str(tmp_path / 'probe.json')
    assert _cli('probe', pipeline['p.ckpt'], pairs, '-o', out) == 0
    with io.open(out, 'r', encoding='utf-8') as f:
        report = json.load(f)
    assert report[0]['term1'] == 'headache'
    assert report[0]['same_concept'] is True
    assert report[1]['same_concept'] is False


@pytest.mark.cli
@pytest.mark.timeout(60)
def test_cli_deterministic(tmp_path):
    vocab = str(tmp_path / 'v.tsv')
    assert _cli('synth', '--concepts', '20', '-o', vocab) == 0
    checksums = []
    for name in ('a.ckpt', 'b.ckpt'):
        path = str(tmp_path / name)
        assert _cli('train', vocab, '--deterministic', '--steps', '3', '--warmup', '1', '--b', '2',
                    '--k', '2', '--m', '3', '--buckets', '512', '--dim', '8', '-o', path) == 0
        with io.open(path, 'rb') as f:
            checksums.append(hashlib.sha256(f.read()).hexdigest())

    assert checksums[0] == checksums[1]


@pytest.mark.cli
def test_cli_config_precedence(tmp_path):
    vocab = str(tmp_path / 'v.tsv')
    assert _cli('synth', '--concepts', '20', '-o', vocab) == 0
    config = _write(tmp_path / 'c.json', json.dumps({'k': 5, 'total_steps': 2, 'warmup_steps': 1,
                                                      'loss_hyper': {'beta': 20.0}}))
    path = str(tmp_path / 'p.ckpt')
    assert _cli('train', vocab, '--config', config, '--k', '2', '--m', '3', '--b', '2',
                '--buckets', '512', '--dim', '8', '--refresh-steps', 'never', '-o', path) == 0
    with io.open(path + '.manifest.json', 'r', encoding='utf-8') as f:
        manifest = json.load(f)

    assert manifest['command'] == 'train'
    assert manifest['config']['k'] == 2
    assert manifest['config']['total_steps'] == 2
    assert manifest['config']['loss_hyper']['beta'] == 20.0
    assert manifest['config']['refresh_interval_steps'] == 'never'
    assert manifest['rng_seed'] == 42
    assert vocab in manifest['inputs']


def _manifest_of(path):
    with io.open(path + '.manifest.json', 'r', encoding='utf-8') as f:
        return json.load(f)


@pytest.mark.cli
def test_cli_seed_precedence(tmp_path):
    config = _write(tmp_path / 'c.json', json.dumps({'rng_seed': 7, 'concept_count': 20}))
    from_file = str(tmp_path / 'file.tsv')
    from_flag = str(tmp_path / 'flag.tsv')
    overridden = str(tmp_path / 'overridden.tsv')
    assert _cli('synth', '--config', config, '-o', from_file) == 0
    assert _cli('synth', '--concepts', '20', '--seed', '7', '-o', from_flag) == 0
    assert _cli('synth', '--config', config, '--seed', '9', '-o', overridden) == 0

    assert _manifest_of(from_file)['rng_seed'] == 7
    assert _manifest_of(from_file)['config']['rng_seed'] == 7
    assert load_vocabulary(from_file) == load_vocabulary(from_flag)
    assert _manifest_of(overridden)['rng_seed'] == 9
    assert load_vocabulary(overridden) != load_vocabulary(from_file)

    train_config = _write(tmp_path / 't.json', json.dumps({'rng_seed': 11, 'total_steps': 1, 'warmup_steps': 0}))
    path = str(tmp_path / 'p.ckpt')
    assert _cli('train', from_file, '--config', train_config, '--b', '2', '--k', '1', '--m', '2',
                '--buckets', '512', '--dim', '8', '-o', path) == 0
    assert _manifest_of(path)['rng_seed'] == 11
    assert _manifest_of(path)['config']['rng_seed'] == 11


@pytest.mark.cli
def test_cli_exit_codes(tmp_path):
    bad_vocab = _write(tmp_path / 'bad.tsv', 'C1 headache\n')
    assert _cli('train', bad_vocab, '-o', str(tmp_path / 'p.ckpt')) == 3

    vocab = str(tmp_path / 'v.tsv')
    assert _cli('synth', '--concepts', '5', '-o', vocab) == 0
    assert _cli('train', vocab, '--steps', '10', '--warmup', '20', '-o', str(tmp_path / 'p.ckpt')) == 2
    assert _cli('synth', '--concepts', '1', '-o', vocab) == 2

    embeddings = str(tmp_path / 'e.bin')
    save_embeddings(embeddings, np.eye(4))
    assert _cli('index', embeddings, '--m', '4', '-o', str(tmp_path / 't.bin')) == 2

    save_embeddings(embeddings, np.array([[1.0, 0.0], [np.nan, 1.0], [0.0, 1.0]]))
    assert _cli('index', embeddings, '--m', '1', '-o', str(tmp_path / 't.bin')) == 4

    save_embeddings(embeddings, np.eye(4))
    table = str(tmp_path / 't.bin')
    assert _cli('index', embeddings, '--m', '2', '-o', table) == 0
    assert _cli('eval', table, vocab, '--theta', '0.5') == 3


@pytest.mark.cli
@pytest.mark.parametrize('command', ['eval', 'sweep', 'cluster'])
def test_cli_table_vocabulary_mismatch(tmp_path, pipeline, command):
    other = str(tmp_path / 'other.tsv')
    assert _cli('synth', '--concepts', '4', '--synonyms-min', '1', '--synonyms-max', '1', '-o', other) == 0
    out = str(tmp_path / 'out')

    assert _cli(command, pipeline['t.bin'], other, '--theta' if command != 'sweep' else '--grid',
                '0.7', '-o', out) == 3
    assert not os.path.exists(out)


@pytest.mark.cli
def test_cli_file_errors(tmp_path, caplog):
    missing = str(tmp_path / 'missing.tsv')
    assert _cli('train', missing, '-o', str(tmp_path / 'p.ckpt')) == 3
    assert any('missing.tsv' in r.getMessage() and ArtifactIOError.__name__ in r.getMessage()
               for r in caplog.records)

    unwritable = str(tmp_path / 'no_such_dir' / 'v.tsv')
    assert _cli('synth', '--concepts', '5', '-o', unwritable) == 3
    assert not os.path.exists(unwritable)

    embeddings = str(tmp_path / 'e.bin')
    save_embeddings(embeddings, np.eye(4))
    assert _cli('index', embeddings, '--m', '2', '-o', str(tmp_path / 'no_such_dir' / 't.bin')) == 3


@pytest.mark.cli
def test_cli_eval_without_output(tmp_path, pipeline):
    assert _cli('eval', pipeline['t.bin'], pipeline['vocab.tsv'], '--theta', '0.7') == 0
    manifest = _manifest_of(pipeline['t.bin'] + '.eval')

    assert manifest['command'] == 'eval'
    assert manifest['outputs'] == []
    assert sorted(manifest['inputs']) == sorted([pipeline['t.bin'], pipeline['vocab.tsv']])


@pytest.mark.cli
def test_cli_plot(tmp_path):
    pytest.importorskip('matplotlib')
    table, clusters = _four_term_instance()
    csv_path = str(tmp_path / 'run.csv')
    write_sweep_csv(csv_path, sweep(table, clusters, [0.3, 0.6, 0.9])[0])
    out = str(tmp_path / 'curves.png')

    assert _cli('plot', csv_path, '-o', out) == 0
    assert os.path.getsize(out) > 0


@pytest.mark.slow
@pytest.mark.timeout(3 * 1800)
def test_ablation_ordering():
    spec = SynthSpec(concept_count=5000, hard_family_fraction=0.5, rng_seed=7)
    vocab, clusters = synth_vocabulary(spec)
    base = TrainConfig(b=16,
                       k=8,
                       m=8,
                       total_steps=3000,
                       warmup_steps=300,
                       refresh_interval_steps=500,
                       log_interval_steps=500,
                       bucket_count=2 ** 16,
                       dim=64,
                       threads=0)
    best_f1 = {}
    precision = {}
    for setting in ('a', 'b', 'c'):
        params, _ = train(vocab, clusters, ablation_config(base, setting))
        table = build_neighbor_table(params.encode_batch(vocab.surfaces), 30, threads=0)
        reports, _ = sweep(table, clusters, threads=0)
        best_f1[setting] = max(r.f1 for r in reports)
        precision[setting] = {r.theta: r.precision for r in reports if 0.60 <= r.theta <= 0.95}

    assert vocab.n >= 15000
    assert best_f1['c'] >= best_f1['b'] + 0.03
    assert best_f1['b'] + 0.03 >= best_f1['a'] + 0.06
    assert len(precision['a']) == 36
    assert all(precision['c'][theta] > precision['a'][theta] for theta in precision['a'])
