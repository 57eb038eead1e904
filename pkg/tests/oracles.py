"""Independent reference computations used by the tests."""

from __future__ import annotations

import math

import numpy as np
import torch


def central_difference_check(params, loss_fn, samples=None, step=1e-5, rng=None):
    """Compare autograd gradients with central finite differences.

    ``params`` is a list of float64 tensors with ``requires_grad``;
    ``loss_fn()`` recomputes the scalar loss. ``samples`` caps the number of
    scalar entries checked (drawn uniformly over all entries). Returns the
    array of relative errors ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``1e4`` times the roundoff level ``eps * |loss| / step`` of
    the difference quotient, so entries whose true gradient is zero (biases
    feeding a normalisation, key biases under softmax) pass only when the
    two estimates agree to within roughly that roundoff.
    """
    for p in params:
        assert p.dtype == torch.float64
        p.grad = None
    loss = loss_fn()
    loss.backward()
    floor = max(1e4 * np.finfo(np.float64).eps * abs(loss.item()) / step, 1e-12)
    analytic = [p.grad.detach().clone() for p in params]

    index = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if samples is not None and samples < len(index):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(index), size=samples, replace=False)
        index = [index[k] for k in sorted(pick)]

    errors = []
    with torch.no_grad():
        for i, j in index:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[i].view(-1)[j].item()
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return np.array(errors)


def naive_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Per-pair loop implementation of multi-head self-attention on one sample (numpy)."""
    t, d = x.shape
    hd = d // heads
    q = x @ wq.T + bq
    k = x @ wk.T + bk
    v = x @ wv.T + bv
    out = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(t):
            logits = [sum(q[i, sl][c] * k[j, sl][c] for c in range(hd)) / math.sqrt(hd) for j in range(t)]
            m = max(logits)
            w = [math.exp(l - m) for l in logits]
            s = sum(w)
            for j in range(t):
                out[i, sl] += (w[j] / s) * v[j, sl]
    return out @ wo.T + bo


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def paired_bootstrap_p(scores_a, scores_b, labels, n_boot=10_000, seed=0, chunk=500):
    """Two-sided p-value of AUC_a - AUC_b from a class-stratified paired bootstrap.

    AUCs are computed by explicit pair comparison on each resample, with no
    ranks involved. The p-value uses the bootstrap standard deviation of the
    difference with a normal reference.
    """
    from scipy.stats import norm

    a = np.asarray(scores_a, float)
    b = np.asarray(scores_b, float)
    y = np.asarray(labels)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    rng = np.random.default_rng(seed)

    def pair_auc(s, pi, ni):
        sp = s[pi][:, :, None]
        sn = s[ni][:, None, :]
        return ((sp > sn) + 0.5 * (sp == sn)).mean(axis=(1, 2))

    def full_auc(s):
        return pair_auc(s, pos[None], neg[None])[0]

    diffs = []
    for start in range(0, n_boot, chunk):
        m = min(chunk, n_boot - start)
        pi = pos[rng.integers(0, len(pos), (m, len(pos)))]
        ni = neg[rng.integers(0, len(neg), (m, len(neg)))]
        diffs.append(pair_auc(a, pi, ni) - pair_auc(b, pi, ni))
    diffs = np.concatenate(diffs)
    d = full_auc(a) - full_auc(b)
    return float(2 * norm.sf(abs(d) / diffs.std(ddof=1))), d
