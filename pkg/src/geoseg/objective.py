"""Loss terms, their analytic gradients and a finite-difference checker.

Total loss for one step::

    mse + alpha * orientation + beta * noise

where ``mse`` is half the squared error averaged over the batch, the
orientation term sums, per filter, the squared response to its orthogonal
pattern minus the squared response to its aligned pattern, and the noise
term sums squared responses to mined noise patches.  Regularizer responses
use valid correlation of the filter over the pattern or patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import bank_as_kernel, forward
from .numerics import (
    Padding, conv2d_backward, correlate_valid, diamond, frob_sq, relu_backward,
)


@dataclass(frozen=True)
class RegWeights:
    alpha: float = 1e-7
    beta: float = 1e-5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"regularization weights must be >= 0, got {self}")


@dataclass
class LossBreakdown:
    mse: float
    l_or: float
    l_no: float
    total: float


def loss_mse(Y, Yg):
    Y = np.asarray(Y, dtype=np.float64)
    Yg = np.asarray(Yg, dtype=np.float64)
    if Y.shape != Yg.shape:
        raise ValueError(f"prediction shape {Y.shape} != target shape {Yg.shape}")
    return 0.5 * frob_sq(Y - Yg)


def _check_sizes(W, images):
    if images.shape[-1] < W.shape[-1] or images.shape[-2] < W.shape[-2]:
        raise ValueError(f"stimulus shape {images.shape} smaller than filter shape {W.shape}")


def filter_energy(W, images):
    """Sum over ``images`` of ``||W (*) image||_F^2`` (valid correlation)."""
    images = np.asarray(images, dtype=np.float64)
    _check_sizes(W, images)
    return frob_sq(correlate_valid(images, W))


def filter_energy_grad(W, images):
    """Gradient of :func:`filter_energy` coefficient by coefficient.

    Entry (a, b) is ``2 <W (*) I, I'_ab>`` where ``I'_ab`` is the slice of
    ``I`` aligned with the response when the filter is offset by (a, b).
    """
    images = np.asarray(images, dtype=np.float64)
    _check_sizes(W, images)
    R = correlate_valid(images, W)
    Ho, Wo = R.shape[-2:]
    g = np.empty(W.shape)
    for a in range(W.shape[0]):
        for b in range(W.shape[1]):
            g[a, b] = 2.0 * diamond(R, images[..., a:a + Ho, b:b + Wo])
    return g


def _pattern_arrays(pairs):
    aligned = np.stack([p.aligned.pixels for p in pairs])
    orth = np.stack([p.orthogonal.pixels for p in pairs])
    return aligned, orth


def _noise_array(ns):
    return np.asarray(getattr(ns, "patches", ns), dtype=np.float64)


def _check_scales(rep, per_scale, what):
    if len(per_scale) != len(rep.banks):
        raise ValueError(f"{what}: got {len(per_scale)} scales for {len(rep.banks)} filter banks")


def loss_orientation(rep, patterns):
    """``patterns`` holds one list of PatternPair per scale, one pair per filter."""
    _check_scales(rep, patterns, "patterns")
    total = 0.0
    for bank, pairs in zip(rep.banks, patterns):
        aligned, orth = _pattern_arrays(pairs)
        if len(pairs) != len(bank):
            raise ValueError(f"{len(pairs)} pattern pairs for {len(bank)} filters")
        for W, i_s, i_o in zip(bank, aligned, orth):
            total += filter_energy(W, i_o) - filter_energy(W, i_s)
    return total


def loss_noise(rep, noise):
    """``noise`` holds one NoisePatchSet (or (P, Ps, Ps) array) per scale."""
    _check_scales(rep, noise, "noise")
    total = 0.0
    for bank, ns in zip(rep.banks, noise):
        patches = _noise_array(ns)
        for W in bank:
            total += filter_energy(W, patches)
    return total


def grad_orientation(rep, patterns):
    _check_scales(rep, patterns, "patterns")
    grads = []
    for bank, pairs in zip(rep.banks, patterns):
        aligned, orth = _pattern_arrays(pairs)
        grads.append(np.stack([
            filter_energy_grad(W, i_o) - filter_energy_grad(W, i_s)
            for W, i_s, i_o in zip(bank, aligned, orth)
        ]))
    return grads


def grad_noise(rep, noise):
    _check_scales(rep, noise, "noise")
    grads = []
    for bank, ns in zip(rep.banks, noise):
        patches = _noise_array(ns)
        grads.append(np.stack([filter_energy_grad(W, patches) for W in bank]))
    return grads


def window_gram(images, m, chunk=16):
    """``sum_windows vec(w) vec(w)^T`` over every m x m window of ``images`` (n, S, S)."""
    images = np.asarray(images, dtype=np.float64).reshape((-1,) + np.shape(images)[-2:])
    G = np.zeros((m * m, m * m))
    for i in range(0, len(images), chunk):
        win = sliding_window_view(images[i:i + chunk], (m, m), axis=(-2, -1)).reshape(-1, m * m)
        G += win.T @ win
    return G


@dataclass
class RegularizerGram:
    """Quadratic forms equivalent to the two regularizers for fixed prior assets.

    Since every regularizer term is ``||W (*) I||^2 = w^T G_I w`` with
    ``G_I`` the Gram matrix of the m x m windows of ``I``, the per-step cost
    is independent of how many patches were mined.
    """

    orientation: list = field(default_factory=list)  # per scale (K, m*m, m*m)
    noise: list = field(default_factory=list)  # per scale (m*m, m*m)

    @classmethod
    def build(cls, priors, filter_sizes):
        orient, noise = [], []
        for i, m in enumerate(filter_sizes):
            aligned, orth = _pattern_arrays(priors.patterns[i])
            _check_sizes(np.zeros((m, m)), aligned)
            orient.append(np.stack([window_gram(o, m) - window_gram(s, m)
                                    for s, o in zip(aligned, orth)]))
            patches = _noise_array(priors.noise[i])
            if len(patches):
                _check_sizes(np.zeros((m, m)), patches)
            noise.append(window_gram(patches, m) if len(patches) else np.zeros((m * m, m * m)))
        return cls(orient, noise)

    def orientation_loss_grad(self, rep):
        loss, grads = 0.0, []
        for bank, G in zip(rep.banks, self.orientation):
            w = bank.reshape(len(bank), -1)
            Gw = np.einsum("kij,kj->ki", G, w)
            loss += float(np.sum(w * Gw))
            grads.append((2.0 * Gw).reshape(bank.shape))
        return loss, grads

    def noise_loss_grad(self, rep):
        loss, grads = 0.0, []
        for bank, G in zip(rep.banks, self.noise):
            w = bank.reshape(len(bank), -1)
            Gw = w @ G
            loss += float(np.sum(w * Gw))
            grads.append((2.0 * Gw).reshape(bank.shape))
        return loss, grads


@dataclass
class GradientSet:
    """Gradients laid out like :class:`geoseg.model.Params`."""

    params: object  # Params of gradients

    @property
    def rep(self):
        return self.params.rep

    @property
    def task(self):
        return self.params.task


def _split_batch(X, Yg):
    X = np.asarray(X, dtype=np.float64)
    Yg = np.asarray(Yg, dtype=np.float64)
    if X.ndim == 2:
        X, Yg = X[None], Yg[None]
    if X.shape != Yg.shape:
        raise ValueError(f"image batch shape {X.shape} != label batch shape {Yg.shape}")
    return X, Yg


def _regularizers(params, weights, priors, gram):
    rep = params.rep
    zeros = [np.zeros_like(b) for b in rep.banks]
    if priors is None and gram is None:
        if weights.alpha or weights.beta:
            raise ValueError("non-zero regularization weights need prior assets")
        return 0.0, zeros, 0.0, zeros
    if gram is None:
        gram = RegularizerGram.build(priors, [b.shape[-1] for b in rep.banks])
    l_or, g_or = gram.orientation_loss_grad(rep)
    l_no, g_no = gram.noise_loss_grad(rep)
    return l_or, g_or, l_no, g_no


def total_loss(X, Yg, params, config, weights, priors=None, gram=None):
    """Forward-only total loss, same accumulation as :func:`backward`."""
    X, Yg = _split_batch(X, Yg)
    Y = forward(X, params, config)
    mse = loss_mse(Y, Yg) / len(X)
    l_or, _, l_no, _ = _regularizers(params, weights, priors, gram)
    return LossBreakdown(mse, l_or, l_no, mse + weights.alpha * l_or + weights.beta * l_no)


def backward(X, Yg, params, config, weights, priors=None, gram=None):
    """Loss breakdown and gradients of the total loss for a batch.

    ``X`` and ``Yg`` are (M, N) or (B, M, N); the squared error is summed
    over the batch and divided by B.  Regularizers enter once per call and
    only touch representation filters.  ``gram`` (a prebuilt
    :class:`RegularizerGram`) replaces ``priors`` for repeated calls.
    """
    X, Yg = _split_batch(X, Yg)
    B = len(X)
    p = params
    trace = {}
    Y = forward(X, p, config, trace)
    diff = Y - Yg
    mse = 0.5 * frob_sq(diff) / B

    same = Padding.SAME
    dH = (diff / B * Y * (1.0 - Y))[..., None]
    xs = trace["block_in"]
    gx, g_head, g_head_b = conv2d_backward(xs[-1], p.task.head, dH, same)
    g_blocks, g_block_b = [None] * len(p.task.blocks), [None] * len(p.task.blocks)
    for i in reversed(range(len(p.task.blocks))):
        dz = relu_backward(trace[f"block_pre.{i}"], gx)
        gi, g_blocks[i], g_block_b[i] = conv2d_backward(xs[i], p.task.blocks[i], dz, same)
        gx = gx + gi
    dzb = relu_backward(trace["bridge_pre"], gx)
    gfeat, g_bridge, g_bridge_b = conv2d_backward(trace["features"], p.task.bridge, dzb, same)

    K = p.rep.banks[0].shape[0]
    l_or, g_or, l_no, g_no = _regularizers(p, weights, priors, gram)
    g_banks = []
    for s, bank in enumerate(p.rep.banks):
        dz = relu_backward(trace[f"rep_pre.{s}"], gfeat[..., s * K:(s + 1) * K])
        _, gk, _ = conv2d_backward(trace["input"], bank_as_kernel(bank), dz, same, need_input=False)
        g_data = gk[:, :, 0, :].transpose(2, 0, 1)
        g_banks.append(g_data + weights.alpha * g_or[s] + weights.beta * g_no[s])

    total = mse + weights.alpha * l_or + weights.beta * l_no
    grads = type(p).from_tensors(
        g_banks + [g_bridge, g_bridge_b]
        + [t for pair in zip(g_blocks, g_block_b) for t in pair]
        + [g_head, g_head_b],
        len(p.rep.banks), len(p.task.blocks),
    )
    return LossBreakdown(mse, l_or, l_no, total), GradientSet(grads)


def rectifier_inputs(X, params, config):
    """Every rectifier input of the forward pass, flattened."""
    trace = {}
    forward(X, params, config, trace)
    keys = sorted(k for k in trace if k.startswith(("rep_pre", "block_pre", "bridge_pre")))
    return np.concatenate([trace[k].ravel() for k in keys])


def activation_pattern(X, params, config):
    """Signs of every rectifier input; changes mark a crossed kink."""
    return rectifier_inputs(X, params, config) > 0


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    failures: list  # (index, analytic, numeric, rel error)
    tolerance: float

    @property
    def passed(self):
        return not self.failures and self.n_checked > 0

    @property
    def checked_fraction(self):
        n = self.n_checked + self.n_skipped
        return self.n_checked / n if n else 0.0


def relative_error(a, n, floor=1e-10):
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(loss_fn, x, grad, h=1e-5, tolerance=1e-6, indices=None,
                      skip=None, floor=1e-10):
    """Compare ``grad`` with central differences of ``loss_fn`` at ``x``.

    ``skip(i, x_plus, x_minus)`` may veto a coordinate (e.g. when the
    perturbation crosses a rectifier kink).  Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    indices = range(x.size) if indices is None else indices
    worst, checked, skipped, failures = 0.0, 0, 0, []
    for i in indices:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        if skip is not None and skip(i, xp, xm):
            skipped += 1
            continue
        num = (loss_fn(xp) - loss_fn(xm)) / (2 * h)
        err = relative_error(grad[i], num, floor)
        worst = max(worst, err)
        checked += 1
        if err > tolerance:
            failures.append((int(i), float(grad[i]), float(num), float(err)))
    return GradCheckReport(worst, checked, skipped, failures, tolerance)


def _energy_ld(W, images):
    # direct valid-correlation energy in extended precision
    W = np.asarray(W, dtype=np.longdouble)
    images = np.asarray(images, dtype=np.longdouble)
    m, n = W.shape
    Ho, Wo = images.shape[-2] - m + 1, images.shape[-1] - n + 1
    R = np.zeros(images.shape[:-2] + (Ho, Wo), dtype=np.longdouble)
    for a in range(m):
        for b in range(n):
            R += W[a, b] * images[..., a:a + Ho, b:b + Wo]
    return np.sum(R * R)


def check_regularizer_grads(rep, patterns, noise, h=1e-6, tolerance=1e-7):
    """Central differences of both regularizers against their analytic gradients.

    Each coordinate perturbs one filter, so only that filter's term is
    differenced, evaluated in extended precision: in plain f64 the
    difference quotient carries roundoff of order eps * |loss| / h, which
    swamps small gradient components at this tolerance.
    """
    reports = {}
    grads = {"orientation": grad_orientation(rep, patterns), "noise": grad_noise(rep, noise)}
    for name, g in grads.items():
        worst, checked, failures = 0.0, 0, []
        for s, bank in enumerate(rep.banks):
            for k, W in enumerate(bank):
                if name == "orientation":
                    pair = patterns[s][k]

                    def term(w, pair=pair):
                        return _energy_ld(w, pair.orthogonal.pixels) - _energy_ld(w, pair.aligned.pixels)
                else:
                    def term(w, s=s):
                        return _energy_ld(w, _noise_array(noise[s]))
                hl = np.longdouble(h)
                for i in range(W.size):
                    wp = W.astype(np.longdouble)
                    wm = wp.copy()
                    wp.flat[i] += hl
                    wm.flat[i] -= hl
                    num = float((term(wp) - term(wm)) / (2 * hl))
                    err = relative_error(g[s][k].flat[i], num)
                    worst = max(worst, err)
                    checked += 1
                    if err > tolerance:
                        failures.append(((s, k, i), float(g[s][k].flat[i]), num, err))
        reports[name] = GradCheckReport(worst, checked, 0, failures, tolerance)
    return reports


def check_backward(X, Yg, params, config, weights, priors=None, h=1e-5, tolerance=1e-4,
                   kink_margin=1e-6):
    """Finite-difference check of every parameter gradient from :func:`backward`.

    A coordinate is skipped when its +/-h perturbation flips any rectifier
    or leaves some rectifier input within ``kink_margin`` of zero.
    """
    gram = None
    if priors is not None:
        gram = RegularizerGram.build(priors, [b.shape[-1] for b in params.rep.banks])
    _, grads = backward(X, Yg, params, config, weights, gram=gram)
    x0 = params.flatten()
    Xb, Ygb = _split_batch(X, Yg)
    base = activation_pattern(Xb, params, config)

    def f(v):
        return total_loss(Xb, Ygb, params.unflatten(v), config, weights, gram=gram).total

    def crosses_kink(i, xp, xm):
        for v in (xp, xm):
            z = rectifier_inputs(Xb, params.unflatten(v), config)
            if not np.array_equal(z > 0, base) or np.min(np.abs(z)) < kink_margin:
                return True
        return False

    return finite_diff_check(f, x0, grads.params.flatten(), h, tolerance, skip=crosses_kink)
