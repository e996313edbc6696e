"""
Contrastive training of the term encoder.

Class Trainer supports:
    Iteration over parameter updates (iter_run() yields one record per step).
    Periodic neighbor table refresh with the current parameters (dynamic hard negatives),
    or a table frozen at the initial parameters (refresh_interval_steps=None).
    Gradient accumulation, AdamW with a linear warmup/decay schedule.
"""
import io
import json
import time
import logging
import functools
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .errors import ConfigError, NonFiniteError, SizeMismatchError
from .encoder import init_params, is_power_of_two, load_checkpoint, save_checkpoint, merge_sparse, SparseRows, \
    DEFAULT_BUCKET_COUNT, DEFAULT_DIM, DEFAULT_NGRAM_MIN, DEFAULT_NGRAM_MAX, DEFAULT_MAX_CHARS
from .simindex import build_neighbor_table
from .mining import build_minibatch, hard_negative_same_concept_fraction
from .msloss import LossHyper, pairwise_sims, ms_loss_and_grad, backprop_to_embeddings


logger = logging.getLogger(__name__)


POSITIVE_MODES = ('k-positives', 'single-positive')


@dataclass
class TrainConfig:
    """
    Training configuration. refresh_interval_steps=None means the neighbor
    table built from the initial parameters is never rebuilt.
    """
    b: int = 16
    k: int = 30
    m: int = 30
    total_steps: int = 20000
    accumulation_steps: int = 1
    refresh_interval_steps: object = 2000
    positive_mode: str = 'k-positives'
    peak_lr: float = 1e-2
    warmup_steps: int = 1000
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_hyper: LossHyper = field(default_factory=LossHyper)
    rng_seed: int = 42
    bucket_count: int = DEFAULT_BUCKET_COUNT
    dim: int = DEFAULT_DIM
    ngram_min: int = DEFAULT_NGRAM_MIN
    ngram_max: int = DEFAULT_NGRAM_MAX
    max_chars: int = DEFAULT_MAX_CHARS
    log_interval_steps: int = 500
    probe_anchors: int = 16
    threads: int = 1
    init_checkpoint: object = None


    @property
    def effective_k(self):
        return 1 if self.positive_mode == 'single-positive' else self.k


    def validate(self):
        for name in ('b', 'accumulation_steps', 'dim', 'bucket_count', 'probe_anchors'):
            if getattr(self, name) < 1:
                raise ConfigError('%s must be >= 1.' % name)
        for name in ('k', 'm', 'total_steps', 'warmup_steps', 'log_interval_steps'):
            if getattr(self, name) < 0:
                raise ConfigError('%s must be >= 0.' % name)
        if not is_power_of_two(self.bucket_count):
            raise ConfigError('bucket_count must be a power of two, got %d.' % self.bucket_count)
        if self.warmup_steps > self.total_steps:
            raise ConfigError('warmup_steps (%d) must not exceed total_steps (%d).'
                              % (self.warmup_steps, self.total_steps))
        if self.effective_k < 1:
            raise ConfigError('k must be >= 1.')
        if self.positive_mode not in POSITIVE_MODES:
            raise ConfigError('positive_mode must be one of %s.' % ', '.join(POSITIVE_MODES))
        if self.refresh_interval_steps is not None:
            if self.refresh_interval_steps < 1:
                raise ConfigError('refresh_interval_steps must be >= 1 or never.')
            if self.log_interval_steps and self.refresh_interval_steps % self.log_interval_steps:
                raise ConfigError('log_interval_steps (%d) must divide refresh_interval_steps (%d).'
                                  % (self.log_interval_steps, self.refresh_interval_steps))
        if not self.peak_lr > 0:
            raise ConfigError('peak_lr must be > 0.')
        if self.weight_decay < 0:
            raise ConfigError('weight_decay must be >= 0.')
        self.loss_hyper.validate()
        return self


    def to_dict(self):
        d = asdict(self)
        d['refresh_interval_steps'] = 'never' if self.refresh_interval_steps is None \
            else self.refresh_interval_steps
        return d


    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError('Unknown training options: %s.' % ', '.join(sorted(unknown)))
        if isinstance(d.get('loss_hyper'), dict):
            d['loss_hyper'] = LossHyper(**d['loss_hyper'])
        if d.get('refresh_interval_steps') == 'never':
            d['refresh_interval_steps'] = None
        return cls(**d)


def ablation_config(cfg, setting):
    """
    Return cfg adjusted to an ablation setting:
    'a' one positive, frozen table; 'b' k positives, frozen table;
    'c' k positives, table refreshed every cfg.refresh_interval_steps.
    """
    if setting == 'a':
        return replace(cfg, positive_mode='single-positive', refresh_interval_steps=None)
    if setting == 'b':
        return replace(cfg, positive_mode='k-positives', refresh_interval_steps=None)
    if setting == 'c':
        if cfg.refresh_interval_steps is None:
            raise ConfigError('Setting c needs a refresh interval.')
        return replace(cfg, positive_mode='k-positives')
    raise ConfigError('Unknown ablation setting %r.' % setting)


class OptimizerState:
    """
    AdamW moments shaped like the encoder table and the step counter.
    """
    def __init__(self, first, second, step=0):
        self.first = first
        self.second = second
        self.step = step


    @classmethod
    def zeros_like(cls, table):
        return cls(np.zeros_like(table), np.zeros_like(table), 0)


def lr_at(step, cfg):
    """
    Return the learning rate of a step: linear warmup from 0 to peak_lr over
    warmup_steps, then linear decay to 0 at total_steps.
    """
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.peak_lr
    return max(0.0, cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps))


def adamw_step(params, grads, state, lr, cfg):
    """
    Apply one AdamW update to the rows of the table touched by grads.
    Weight decay is decoupled and applied to touched rows only.
    Return (params, state).
    """
    rows, g = grads
    if not np.all(np.isfinite(g)):
        raise NonFiniteError('Non-finite gradient, the step is aborted.')
    if len(rows) == 0:
        state.step += 1
        return params, state
    if g.shape != (len(rows), params.dim):
        raise SizeMismatchError('A gradient of %s rows does not fit dim %d.' % (g.shape, params.dim))
    g = g.astype(params.table.dtype, copy=False)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    first = b1 * state.first[rows] + (1 - b1) * g
    second = b2 * state.second[rows] + (1 - b2) * g * g
    state.first[rows] = first
    state.second[rows] = second
    first_hat = first / (1 - b1 ** state.step)
    second_hat = second / (1 - b2 ** state.step)
    p = params.table[rows]
    if cfg.weight_decay:
        p = p - lr * cfg.weight_decay * p
    params.table[rows] = p - lr * first_hat / (np.sqrt(second_hat) + cfg.adam_eps)
    return params, state


def batch_gradient(params, batch, hyper, threads=1):
    """
    Return (loss, SparseRows table gradient) of one mini-batch.
    """
    embeddings = params.encode_batch(batch.surfaces, threads)
    loss, grad_s = ms_loss_and_grad(pairwise_sims(embeddings), batch.labels, hyper)
    grad_e = backprop_to_embeddings(grad_s, embeddings)
    return loss, params.encode_batch_grad(batch.surfaces, grad_e)


def accumulate(parts):
    """
    Return the mean of micro-batch gradients.
    """
    merged = merge_sparse(parts)
    if len(parts) > 1 and len(merged.rows):
        merged = SparseRows(merged.rows, merged.values / len(parts))
    return merged


class TrainerIsNotStartedError(Exception):
    """
    The exception occurs when we call some methods of Trainer before calling start().
    """
    pass


def _check_started(f):
    """
    Decorator for Trainer methods.
    Checks if started (start() was called).
    """
    @functools.wraps(f)
    def inner(self, *args, **kwargs):
        if self._params is None:
            raise TrainerIsNotStartedError('Call start() first to initialize the parameters.')
        return f(self, *args, **kwargs)

    return inner


class Trainer(object):
    """
    The main class to train encoder parameters on a vocabulary.
    """
    def __init__(self, vocab, clusters, cfg, params=None):
        """
        The class constructor.
        Parameters
        ----------
        vocab: Vocabulary
            Terms to train on.
        clusters: ClusterMap
            Ground truth clusters of vocab.
        cfg: TrainConfig
            Training configuration.
        params: EncoderParams
            Initial parameters. If None they are loaded from cfg.init_checkpoint
            or initialized randomly from cfg.rng_seed.
        """
        self._vocab = vocab
        self._clusters = clusters
        self._cfg = cfg.validate()
        self._initial_params = params
        self._params = None
        self._state = None
        self._table = None
        self._refresh_count = 0
        self._hard_fraction = None
        self._probe = None
        self._step = 0
        self._started = None


    def __str__(self):
        return '<%s n=%d step=%d/%d refreshes=%d>' % (self.__class__.__name__,
                                                      self._vocab.n,
                                                      self._step,
                                                      self._cfg.total_steps,
                                                      self._refresh_count)


    def __repr__(self):
        return str(self)


    @property
    def params(self):
        return self._params


    @property
    def state(self):
        return self._state


    @property
    def table(self):
        """
        The neighbor table negatives are currently mined from.
        """
        return self._table


    @property
    def refresh_count(self):
        return self._refresh_count


    @property
    def step(self):
        return self._step


    def start(self):
        """
        Initialize parameters, optimizer state, the neighbor table and the probe batch.
        """
        cfg = self._cfg
        if cfg.total_steps and cfg.m > self._vocab.n - 1:
            raise ConfigError('m=%d needs at least %d terms.' % (cfg.m, cfg.m + 1))
        seeds = np.random.SeedSequence(cfg.rng_seed).spawn(3)
        state = None
        if self._initial_params is not None:
            params = self._initial_params
        elif cfg.init_checkpoint:
            params, state = load_checkpoint(cfg.init_checkpoint)
            logger.info('Warm start from %s', cfg.init_checkpoint)
        else:
            params = init_params(bucket_count=cfg.bucket_count,
                                 dim=cfg.dim,
                                 ngram_min=cfg.ngram_min,
                                 ngram_max=cfg.ngram_max,
                                 hash_seed=cfg.rng_seed,
                                 max_chars=cfg.max_chars,
                                 seed=np.random.default_rng(seeds[0]).integers(2 ** 63))
        self._params = params
        if state is not None:
            self._state = OptimizerState(state[1], state[2], state[0])
        else:
            self._state = OptimizerState.zeros_like(params.table)
        self._rng = np.random.default_rng(seeds[1])
        self._step = 0
        self._refresh_count = 0
        self._started = time.time()
        if cfg.total_steps == 0:
            return self
        self._rebuild_table()
        self._probe = build_minibatch(self._vocab, self._clusters, self._table,
                                      cfg.probe_anchors, cfg.effective_k, cfg.m,
                                      np.random.default_rng(seeds[2]))
        return self


    def _rebuild_table(self):
        cfg = self._cfg
        embeddings = self._params.encode_batch(self._vocab.surfaces, cfg.threads)
        m = min(max(cfg.m, 1), self._vocab.n - 1)
        self._table = build_neighbor_table(embeddings, m, threads=cfg.threads)
        self._hard_fraction = hard_negative_same_concept_fraction(self._table, self._clusters)


    def _refresh_due(self, step):
        interval = self._cfg.refresh_interval_steps
        return interval is not None and step > 1 and (step - 1) % interval == 0


    @_check_started
    def probe_loss(self):
        """
        Return the loss of the fixed probe batch under the current parameters.
        """
        if self._probe is None:
            return None
        embeddings = self._params.encode_batch(self._probe.surfaces, self._cfg.threads)
        return ms_loss_and_grad(pairwise_sims(embeddings), self._probe.labels, self._cfg.loss_hyper)[0]


    def _record(self, step, loss, lr):
        return {'step': step,
                'loss': loss,
                'lr': lr,
                'hard_neg_same_cui_fraction': self._hard_fraction,
                'refresh_count': self._refresh_count}


    @_check_started
    def iter_run(self):
        """
        Iterate parameter updates. Yield one metrics record per step:
        {step, loss, lr, hard_neg_same_cui_fraction, refresh_count}.
        """
        cfg = self._cfg
        k = cfg.effective_k
        while self._step < cfg.total_steps:
            step = self._step + 1
            if self._refresh_due(step):
                self._rebuild_table()
                self._refresh_count += 1
                logger.info('Refresh %d before step %d: same-concept neighbor fraction %.4f, '
                            'probe loss %.6f, %.1fs elapsed',
                            self._refresh_count, step, self._hard_fraction,
                            self.probe_loss(), time.time() - self._started)
            losses = []
            parts = []
            for _ in range(cfg.accumulation_steps):
                batch = build_minibatch(self._vocab, self._clusters, self._table,
                                        cfg.b, k, cfg.m, self._rng)
                loss, grad = batch_gradient(self._params, batch, cfg.loss_hyper, cfg.threads)
                losses.append(loss)
                parts.append(grad)
            lr = lr_at(step, cfg)
            adamw_step(self._params, accumulate(parts), self._state, lr, cfg)
            self._step = step
            yield self._record(step, float(np.mean(losses)), lr)


def write_metrics(f, record):
    f.write(json.dumps(record, sort_keys=True) + '\n')


def train(vocab, clusters, cfg, params=None, metrics_path=None, checkpoint_path=None):
    """
    Run cfg.total_steps updates. Return (params, metrics) where metrics holds
    the records of logged steps (every log_interval_steps and the last step).
    A checkpoint is written to checkpoint_path on completion and on abort.
    """
    trainer = Trainer(vocab, clusters, cfg, params).start()
    metrics = []
    out = io.open(metrics_path, 'w', encoding='utf-8') if metrics_path else None
    try:
        for record in trainer.iter_run():
            step = record['step']
            if (cfg.log_interval_steps and step % cfg.log_interval_steps == 0) or step == cfg.total_steps:
                record['probe_loss'] = trainer.probe_loss()
                metrics.append(record)
                logger.info('step %d loss %.6f probe %.6f lr %.3g', step, record['loss'],
                            record['probe_loss'], record['lr'])
                if out is not None:
                    write_metrics(out, record)
    except BaseException:
        if checkpoint_path:
            logger.error('Training aborted at step %d, writing %s', trainer.step, checkpoint_path)
            save_checkpoint(checkpoint_path, trainer.params, trainer.state.step,
                            (trainer.state.first, trainer.state.second))
        raise
    finally:
        if out is not None:
            out.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, trainer.params, trainer.state.step,
                        (trainer.state.first, trainer.state.second))
    return trainer.params, metrics
