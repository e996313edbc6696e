"""
Multi-Similarity loss over an in-batch cosine similarity matrix.

For anchor i with label c_i:
    N_i = {j : c_j != c_i, S_ij > min_{k != i, c_k = c_i} S_ik - epsilon}
    P_i = {j != i : c_j = c_i, S_ij < max_{c_k != c_i} S_ik + epsilon}
    L = 1/D sum_i [ log(1 + sum_{P_i} exp(-alpha (S_ij - lambda))) / alpha
                  + log(1 + sum_{N_i} exp(beta (S_ij - lambda))) / beta ]
An empty min is +inf and an empty max is -inf, so degenerate anchors get empty sets.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError, SizeMismatchError


@dataclass
class LossHyper:
    """
    Hyperparameters of the loss: positive and negative strengths,
    margin and mining slack.
    """
    alpha: float = 2.0
    beta: float = 50.0
    lambda_: float = 1.0
    epsilon: float = 0.1


    def validate(self):
        if not self.alpha > 0:
            raise ConfigError('alpha must be > 0 (got %r).' % self.alpha)
        if not self.beta > 0:
            raise ConfigError('beta must be > 0 (got %r).' % self.beta)
        if not self.epsilon >= 0:
            raise ConfigError('epsilon must be >= 0 (got %r).' % self.epsilon)
        return self


def loss_denominator(batch_size):
    """
    The number the summed anchor losses are divided by: every batch entry is an anchor.
    """
    return batch_size


@dataclass
class MinedPairs:
    """
    Boolean masks of mined pairs: positive[i, j] iff j in P_i,
    negative[i, j] iff j in N_i.
    """
    positive: np.ndarray
    negative: np.ndarray


    def P(self, i):
        return np.flatnonzero(self.positive[i])


    def N(self, i):
        return np.flatnonzero(self.negative[i])


    @property
    def empty(self):
        return not (self.positive.any() or self.negative.any())


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError('%s contains non-finite values.' % what)


def pairwise_sims(embeddings):
    """
    Return S = E E^T for a matrix of unit rows.
    """
    embeddings = np.asarray(embeddings)
    _check_finite(embeddings, 'The embedding batch')
    return embeddings @ embeddings.T


def mine_pairs(S, labels, epsilon):
    """
    Return the MinedPairs of a similarity matrix.
    """
    S = np.asarray(S)
    labels = np.asarray(labels)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] != len(labels):
        raise SizeMismatchError('S must be square with one row per label.')
    same = labels[:, None] == labels[None, :]
    candidates_pos = same.copy()
    np.fill_diagonal(candidates_pos, False)
    candidates_neg = ~same
    min_pos = np.where(candidates_pos, S, np.inf).min(axis=1)
    max_neg = np.where(candidates_neg, S, -np.inf).max(axis=1)
    negative = candidates_neg & (S > (min_pos - epsilon)[:, None])
    positive = candidates_pos & (S < (max_neg + epsilon)[:, None])
    return MinedPairs(positive, negative)


def _log1p_sum_exp(x, mask):
    """
    Return log(1 + sum_j exp(x_ij)) over masked entries of every row and
    the weights exp(x_ij) / (1 + sum_k exp(x_ik)).
    """
    x = np.where(mask, x, -np.inf)
    shift = np.maximum(x.max(axis=1), 0.0)
    terms = np.exp(x - shift[:, None])
    total = np.exp(-shift) + terms.sum(axis=1)
    return np.log(total) + shift, terms / total[:, None]


def ms_loss_and_grad(S, labels, hyper, pairs=None):
    """
    Return (loss, dL/dS) with the mined sets held fixed.
    """
    S = np.asarray(S)
    _check_finite(S, 'The similarity matrix')
    if pairs is None:
        pairs = mine_pairs(S, labels, hyper.epsilon)
    denominator = loss_denominator(S.shape[0])
    pos_lse, pos_w = _log1p_sum_exp(-hyper.alpha * (S - hyper.lambda_), pairs.positive)
    neg_lse, neg_w = _log1p_sum_exp(hyper.beta * (S - hyper.lambda_), pairs.negative)
    loss = (pos_lse.sum() / hyper.alpha + neg_lse.sum() / hyper.beta) / denominator
    grad = (neg_w - pos_w) / denominator
    return float(loss), grad


def ms_loss(S, labels, hyper):
    """
    Return the loss value (>= 0).
    """
    return ms_loss_and_grad(S, labels, hyper)[0]


def ms_loss_grad(S, labels, hyper):
    """
    Return dL/dS; non-zero only on mined pairs, <= 0 on positives and >= 0 on negatives.
    """
    return ms_loss_and_grad(S, labels, hyper)[1]


def backprop_to_embeddings(grad_s, embeddings):
    """
    Return dL/dE = (G + G^T) E for S = E E^T.
    """
    grad_s = np.asarray(grad_s)
    embeddings = np.asarray(embeddings)
    if grad_s.shape != (embeddings.shape[0], embeddings.shape[0]):
        raise SizeMismatchError('dL/dS is %s but the batch has %d entries.'
                                % (grad_s.shape, embeddings.shape[0]))
    return (grad_s + grad_s.T) @ embeddings
