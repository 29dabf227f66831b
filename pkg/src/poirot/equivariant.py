"""Equivariant layers with explicit forward and backward passes.

Array conventions: a batch of sphere signals is (P, C, 2B, 2B), a batch of
rotation signals is (P, C, 2B, 2B, 2B).  Complex gradients follow
``grad = dL/dRe(z) + i dL/dIm(z)``, so for ``z = M x`` the input gradient is
``M^H grad_z`` (real part taken at real inputs).

Kernels are real coefficient tensors in the real spherical-harmonic basis:
(C_in, B, B, C_out) for sphere kernels, where each B x B slice holds the B^2
coefficients (l, a) at flat position ``l^2 + l + a``, and (C_in, B^2, B^2,
C_out) for rotation kernels, of which only the same-degree diagonal blocks
are used.  Both are stored as tensor rings (or densely, for reference).
"""

import numpy as np

from .errors import ShapeError, SizeError, StateError
from .harmonic import (
    real_basis,
    s2_analyze,
    s2_real_to_complex,
    s2_synthesize,
    so3_analyze_adjoint,
    so3_analyze_values,
    so3_synthesize_adjoint,
    so3_synthesize_complex,
)
from .signals import HAAR_VOLUME, SO3Grid, SO3Signal, S2Spectrum, SO3Spectrum


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=float)
        self.grad = np.zeros_like(self.value)


class Module:
    """Minimal layer base: named parameters, buffers and children."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.children = {}
        self._cache = None
        self.training = True

    def named_parameters(self, prefix=""):
        for k, p in self.params.items():
            yield prefix + k, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, b in self.buffers.items():
            yield prefix + k, b
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameter_count(self):
        own = sum(p.value.size for p in self.params.values())
        return int(own + sum(c.parameter_count() for c in self.children.values()))

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad[...] = 0.0

    def train(self, mode=True):
        self.training = mode
        for c in self.children.values():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        return cache


# ---------------------------------------------------------------------------
# tensor rings


def tr_materialize_cores(cores):
    """``W[i1..ik] = trace(T1[i1] ... Tk[ik])`` for cores of shape (n_j, p, p)."""
    if len(cores) < 2:
        raise ShapeError("a tensor ring needs at least two cores")
    p = cores[0].shape[1]
    for c in cores:
        if c.ndim != 3 or c.shape[1:] != (p, p):
            raise ShapeError(f"every core must have shape (n, {p}, {p}), got {c.shape}")
    acc = cores[0]
    for c in cores[1:-1]:
        acc = np.einsum("xab,ibc->xiac", acc, c).reshape(-1, p, p)
    out = np.einsum("xab,iba->xi", acc, cores[-1])
    return out.reshape([c.shape[0] for c in cores])


class TensorRingKernel(Module):
    """Learnable tensor stored as a ring of order-3 cores."""

    def __init__(self, mode_sizes, core_size, rng=None, variance=1.0, cores=None):
        super().__init__()
        self.mode_sizes = tuple(int(n) for n in mode_sizes)
        self.core_size = int(core_size)
        if len(self.mode_sizes) < 2:
            raise ShapeError("a tensor ring needs at least two modes")
        p, k = self.core_size, len(self.mode_sizes)
        if cores is None:
            rng = np.random.default_rng(rng)
            sigma = (variance / p**k) ** (1.0 / (2 * k))
            cores = [rng.normal(0.0, sigma, (n, p, p)) for n in self.mode_sizes]
        for j, c in enumerate(cores):
            if np.shape(c) != (self.mode_sizes[j], p, p):
                raise ShapeError(f"core {j} must have shape {(self.mode_sizes[j], p, p)}, got {np.shape(c)}")
            self.params[f"core{j}"] = Parameter(c)

    @property
    def cores(self):
        return [self.params[f"core{j}"].value for j in range(len(self.mode_sizes))]

    def materialize(self):
        return tr_materialize_cores(self.cores)

    def dense_size(self):
        return int(np.prod(self.mode_sizes))

    def backward(self, grad_w):
        """Accumulate core gradients from the gradient of the materialized tensor."""
        cores = self.cores
        k = len(cores)
        p = self.core_size
        grad_w = np.asarray(grad_w, dtype=float).reshape(self.mode_sizes)
        for j in range(k):
            # environment: product of the cores after j, cyclically, up to j-1
            order = [(j + s) % k for s in range(1, k)]
            env = cores[order[0]]
            for i in order[1:]:
                env = np.einsum("xab,ibc->xiac", env, cores[i]).reshape(-1, p, p)
            # move mode axes of grad into the cyclic order used by env
            perm = [j] + order
            g = np.transpose(grad_w, perm).reshape(self.mode_sizes[j], -1)
            self.params[f"core{j}"].grad += np.einsum("ix,xba->iab", g, env)


def tr_materialize(kernel):
    return kernel.materialize()


def tr_param_count(kernel):
    return kernel.core_size**2 * sum(kernel.mode_sizes)


class DenseKernel(Module):
    """Directly stored tensor; ``used`` marks entries that reach the layer."""

    def __init__(self, mode_sizes, rng=None, variance=1.0, used=None, value=None):
        super().__init__()
        self.mode_sizes = tuple(int(n) for n in mode_sizes)
        self.used = np.ones(self.mode_sizes, bool) if used is None else np.asarray(used, bool)
        if value is None:
            rng = np.random.default_rng(rng)
            value = rng.normal(0.0, np.sqrt(variance), self.mode_sizes)
        self.params["weight"] = Parameter(np.where(self.used, value, 0.0))

    def materialize(self):
        return self.params["weight"].value

    def dense_size(self):
        return int(self.used.sum())

    def backward(self, grad_w):
        self.params["weight"].grad += np.where(self.used, grad_w, 0.0)

    def parameter_count(self):
        return int(self.used.sum())


# ---------------------------------------------------------------------------
# spectral correlation kernels


def _degree_of_flat(B):
    l = np.repeat(np.arange(B), 2 * np.arange(B) + 1)
    a = np.concatenate([np.arange(-k, k + 1) for k in range(B)])
    return l, a


def s2_kernel_spectrum(W, B):
    """Real tensor (C_in, B, B, C_out) -> complex spectrum (C_in, C_out, B, 2B-1)."""
    c_in, _, _, c_out = W.shape
    flat = W.reshape(c_in, B * B, c_out)
    l, a = _degree_of_flat(B)
    A = np.zeros((c_in, c_out, B, 2 * B - 1))
    A[:, :, l, a + B - 1] = flat.transpose(0, 2, 1)
    return s2_real_to_complex(A, B)


def s2_kernel_spectrum_backward(grad_spec, B):
    U = real_basis(B)
    gA = np.einsum("colm,lam->cola", grad_spec, U.conj()).real
    l, a = _degree_of_flat(B)
    c_in, c_out = gA.shape[:2]
    flat = gA[:, :, l, a + B - 1].transpose(0, 2, 1)
    return flat.reshape(c_in, B, B, c_out)


def _block(B, l):
    return slice(B - 1 - l, B + l), slice(l * l, (l + 1) ** 2)


def so3_kernel_blocks(W, B):
    """Real tensor (C_in, B^2, B^2, C_out) -> list of complex blocks (C_in, C_out, 2l+1, 2l+1)."""
    U = real_basis(B)
    blocks = []
    for l in range(B):
        s, f = _block(B, l)
        A = W[:, f, f, :].transpose(0, 3, 1, 2)
        Ul = U[l, s, s]
        blocks.append(np.einsum("am,coab,bn->comn", Ul.conj(), A, Ul))
    return blocks


def so3_kernel_spectrum(W, B):
    c_in, c_out = W.shape[0], W.shape[-1]
    out = np.zeros((c_in, c_out, B, 2 * B - 1, 2 * B - 1), dtype=complex)
    for l, blk in enumerate(so3_kernel_blocks(W, B)):
        s, _ = _block(B, l)
        out[:, :, l, s, s] = blk
    return out


def so3_kernel_used(c_in, c_out, B):
    used = np.zeros((c_in, B * B, B * B, c_out), bool)
    for l in range(B):
        _, f = _block(B, l)
        used[:, f, f, :] = True
    return used


def so3_kernel_blocks_backward(grad_blocks, B, c_in, c_out):
    U = real_basis(B)
    gW = np.zeros((c_in, B * B, B * B, c_out))
    for l, g in enumerate(grad_blocks):
        s, f = _block(B, l)
        Ul = U[l, s, s]
        gA = np.einsum("am,comn,bn->coab", Ul, g, Ul.conj()).real
        gW[:, f, f, :] = gA.transpose(0, 2, 3, 1)
    return gW


# ---------------------------------------------------------------------------
# spectral products


def s2_correlation_spectrum(F, kernel_spec):
    """``h[p, o, l, m, n] = sum_c conj(F[p, c, l, m]) w[c, o, l, n]``."""
    return np.einsum("pclm,coln->polmn", F.conj(), kernel_spec, optimize=True)


def so3_correlation_spectrum(F, kernel_spec):
    """Per degree ``h_l = 8 pi^2 / (2l+1) sum_c F_l[c] w_l[c]^H``."""
    B = F.shape[-3]
    P = F.shape[0]
    c_out = kernel_spec.shape[1]
    H = np.zeros((P, c_out) + F.shape[2:], dtype=complex)
    for l in range(B):
        s, _ = _block(B, l)
        H[:, :, l, s, s] = _so3_block_product(F[:, :, l, s, s], kernel_spec[:, :, l, s, s], l)
    return H


def _so3_block_product(Fl, wl, l):
    P, c_in, d, _ = Fl.shape
    c_out = wl.shape[1]
    k = HAAR_VOLUME / (2 * l + 1)
    # h[p, o, m, n] = k sum_{c, j} F[p, c, m, j] conj(w[c, o, n, j])
    lhs = Fl.transpose(0, 2, 1, 3).reshape(P * d, c_in * d)
    rhs = wl.conj().transpose(0, 3, 1, 2).reshape(c_in * d, c_out * d)
    return (k * (lhs @ rhs)).reshape(P, d, c_out, d).transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# functional correlation on signal containers


def _as_s2_coeffs(signal):
    if isinstance(signal, S2Spectrum):
        return signal.bandwidth, signal.coeffs
    return signal.bandwidth, s2_analyze(signal.values, signal.bandwidth)


def _check_kernel(kernel_spec, c_in, c_out, B, ndim):
    k = np.asarray(kernel_spec)
    expect = (c_in, c_out, B) + (2 * B - 1,) * (ndim - 3)
    if k.shape != expect:
        raise ShapeError(f"kernel spectrum must have shape {expect}, got {k.shape}")
    return k


def s2_correlate(signal, kernel_spectrum, C_in, C_out):
    """Correlate a sphere signal (or spectrum) with sphere kernels; returns an :class:`SO3Signal`."""
    B, F = _as_s2_coeffs(signal)
    if F.shape[0] != C_in:
        raise ShapeError(f"signal has {F.shape[0]} channels, expected {C_in}")
    w = _check_kernel(kernel_spectrum, C_in, C_out, B, 4)
    H = s2_correlation_spectrum(F[None], w)[0]
    return SO3Signal(SO3Grid.build(B), _real(so3_synthesize_complex(H, B)))


def so3_correlate(signal, kernel_spectrum, C_in, C_out):
    B = signal.bandwidth
    if signal.channels != C_in:
        raise ShapeError(f"signal has {signal.channels} channels, expected {C_in}")
    w = _check_kernel(kernel_spectrum, C_in, C_out, B, 5)
    F = so3_analyze_values(signal.values[None], B)
    H = so3_correlation_spectrum(F, w)[0]
    return SO3Signal(signal.grid, _real(so3_synthesize_complex(H, B)))


def so3_correlate_spectrum(spectrum, kernel_spectrum):
    """Spectral-domain correlation of an :class:`SO3Spectrum`."""
    H = so3_correlation_spectrum(spectrum.coeffs[None], np.asarray(kernel_spectrum))[0]
    return SO3Spectrum(spectrum.bandwidth, H)


def _real(z, tol=1e-9):
    if z.size and np.max(np.abs(z.imag)) > tol * max(1.0, np.max(np.abs(z.real))):
        raise ValueError("correlation output is not real; kernel spectrum is not that of a real kernel")
    return z.real


def invariant_integrate(signal):
    """Haar average of each channel (constant 1 maps to 1)."""
    return signal.grid.integrate(signal.values) / HAAR_VOLUME


def relu(signal):
    return type(signal)(signal.grid, np.maximum(signal.values, 0.0))


def normalize(signal, layer):
    """Apply a normalization layer (:class:`ActNorm` or :class:`BatchNorm`) to one signal."""
    out = layer.forward(signal.values[None])
    layer._cache = None
    return type(signal)(signal.grid, out[0])


# ---------------------------------------------------------------------------
# layers


def _make_kernel(mode_sizes, core_size, rng, variance, dense, used=None):
    if dense or core_size is None:
        return DenseKernel(mode_sizes, rng, variance, used=used)
    return TensorRingKernel(mode_sizes, core_size, rng, variance)


class S2Correlation(Module):
    """Sphere signals (P, C_in, 2B, 2B) or spectra (P, C_in, B, 2B-1) -> rotation signals."""

    def __init__(self, bandwidth, c_in, c_out, core_size=4, rng=None, dense=False):
        super().__init__()
        self.B, self.c_in, self.c_out = int(bandwidth), int(c_in), int(c_out)
        B = self.B
        self.children["kernel"] = _make_kernel((c_in, B, B, c_out), core_size, rng, 1.0 / (c_in * B * B), dense)

    @property
    def kernel(self):
        return self.children["kernel"]

    def kernel_spectrum(self):
        return s2_kernel_spectrum(self.kernel.materialize(), self.B)

    def forward(self, x):
        B = self.B
        spectral = np.iscomplexobj(x)
        if spectral:
            if x.shape[1:] != (self.c_in, B, 2 * B - 1):
                raise ShapeError(f"expected spectra of shape (P, {self.c_in}, {B}, {2 * B - 1}), got {x.shape}")
            F = x
        else:
            if x.shape[1:] != (self.c_in, 2 * B, 2 * B):
                raise ShapeError(f"expected sphere signals of shape (P, {self.c_in}, {2 * B}, {2 * B}), got {x.shape}")
            F = s2_analyze(x, B)
        w = self.kernel_spectrum()
        H = s2_correlation_spectrum(F, w)
        self._cache = (F, w, spectral)
        return so3_synthesize_complex(H, B).real

    def backward(self, g):
        F, w, spectral = self._pop_cache()
        B = self.B
        G = so3_synthesize_adjoint(g, B)
        grad_w = np.einsum("polmn,pclm->coln", G, F, optimize=True)
        grad_F = np.einsum("polmn,coln->pclm", G.conj(), w, optimize=True)
        self.kernel.backward(s2_kernel_spectrum_backward(grad_w, B))
        if spectral:
            return grad_F
        _, _, wt = _s2_weights(B)
        return s2_synthesize(grad_F, B).real * wt[:, None]


def _s2_weights(B):
    from .harmonic import _s2_tables

    return _s2_tables(B)


class SO3Correlation(Module):
    def __init__(self, bandwidth, c_in, c_out, core_size=4, rng=None, dense=False):
        super().__init__()
        self.B, self.c_in, self.c_out = int(bandwidth), int(c_in), int(c_out)
        B = self.B
        used = so3_kernel_used(c_in, c_out, B)
        self.children["kernel"] = _make_kernel(
            (c_in, B * B, B * B, c_out), core_size, rng, 1.0 / (c_in * B * B), dense, used=used
        )

    @property
    def kernel(self):
        return self.children["kernel"]

    def kernel_spectrum(self):
        return so3_kernel_spectrum(self.kernel.materialize(), self.B)

    def forward(self, x):
        B = self.B
        if x.shape[1:] != (self.c_in,) + (2 * B,) * 3:
            raise ShapeError(f"expected rotation signals of shape (P, {self.c_in}, {2 * B}, {2 * B}, {2 * B}), got {x.shape}")
        F = so3_analyze_values(x, B)
        blocks = so3_kernel_blocks(self.kernel.materialize(), B)
        P = x.shape[0]
        H = np.zeros((P, self.c_out) + F.shape[2:], dtype=complex)
        for l in range(B):
            s, _ = _block(B, l)
            H[:, :, l, s, s] = _so3_block_product(F[:, :, l, s, s], blocks[l], l)
        self._cache = (F, blocks)
        return so3_synthesize_complex(H, B).real

    def backward(self, g):
        F, blocks = self._pop_cache()
        B = self.B
        G = so3_synthesize_adjoint(g, B)
        grad_F = np.zeros_like(F)
        grad_blocks = []
        for l in range(B):
            s, _ = _block(B, l)
            k = HAAR_VOLUME / (2 * l + 1)
            Gl, Fl, wl = G[:, :, l, s, s], F[:, :, l, s, s], blocks[l]
            grad_F[:, :, l, s, s] = k * np.einsum("pomn,conj->pcmj", Gl, wl, optimize=True)
            grad_blocks.append(k * np.einsum("pomn,pcmj->conj", Gl.conj(), Fl, optimize=True))
        self.kernel.backward(so3_kernel_blocks_backward(grad_blocks, B, self.c_in, self.c_out))
        return so3_analyze_adjoint(grad_F, B)


def _channel_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _expand(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


class ActNorm(Module):
    """Per-channel affine map ``H * x + b``; initialized from the first batch seen."""

    def __init__(self, channels):
        super().__init__()
        self.params["scale"] = Parameter(np.ones(channels))
        self.params["bias"] = Parameter(np.zeros(channels))
        self.buffers["initialized"] = np.zeros(1)

    def initialize(self, x):
        ax = _channel_axes(x)
        mean = x.mean(axis=ax)
        std = x.std(axis=ax)
        std = np.where(std > 1e-12, std, 1.0)
        self.params["scale"].value[...] = 1.0 / std
        self.params["bias"].value[...] = -mean / std
        self.buffers["initialized"][0] = 1.0

    def forward(self, x):
        if self.training and not self.buffers["initialized"][0]:
            self.initialize(x)
        H, b = self.params["scale"].value, self.params["bias"].value
        self._cache = x
        return _expand(H, x.ndim) * x + _expand(b, x.ndim)

    def backward(self, g):
        x = self._pop_cache()
        ax = _channel_axes(x)
        self.params["scale"].grad += np.sum(g * x, axis=ax)
        self.params["bias"].grad += np.sum(g, axis=ax)
        return g * _expand(self.params["scale"].value, x.ndim)


class BatchNorm(Module):
    """Per-channel normalization over batch and grid with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["scale"] = Parameter(np.ones(channels))
        self.params["bias"] = Parameter(np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        if x.shape[0] == 0:
            raise SizeError("batch normalization needs a non-empty batch")
        ax = _channel_axes(x)
        if self.training:
            mean = x.mean(axis=ax)
            var = x.var(axis=ax)
            m = self.momentum
            self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - _expand(mean, x.ndim)) * _expand(inv, x.ndim)
        self._cache = (xhat, inv, self.training)
        return _expand(self.params["scale"].value, x.ndim) * xhat + _expand(self.params["bias"].value, x.ndim)

    def backward(self, g):
        xhat, inv, batch_stats = self._pop_cache()
        ax = _channel_axes(g)
        self.params["scale"].grad += np.sum(g * xhat, axis=ax)
        self.params["bias"].grad += np.sum(g, axis=ax)
        gx = g * _expand(self.params["scale"].value, g.ndim)
        if not batch_stats:
            return gx * _expand(inv, g.ndim)
        mg = gx.mean(axis=ax)
        mgx = (gx * xhat).mean(axis=ax)
        return _expand(inv, g.ndim) * (gx - _expand(mg, g.ndim) - xhat * _expand(mgx, g.ndim))


class ReLU(Module):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, g):
        return g * self._pop_cache()


class Integrate(Module):
    """Haar average over the rotation grid: (P, C, 2B, 2B, 2B) -> (P, C)."""

    def __init__(self, bandwidth):
        super().__init__()
        self.grid = SO3Grid.build(bandwidth)

    def forward(self, x):
        self._cache = x.shape
        return self.grid.integrate(x) / HAAR_VOLUME

    def backward(self, g):
        shape = self._pop_cache()
        w = self.grid.weights / HAAR_VOLUME
        return g[..., None, None, None] * np.broadcast_to(w, shape[-3:])


class Linear(Module):
    """``y = x W + b`` over the last axis."""

    def __init__(self, n_in, n_out, rng=None, bias=True, zero=False):
        super().__init__()
        rng = np.random.default_rng(rng)
        W = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, np.sqrt(2.0 / max(n_in, 1)), (n_in, n_out))
        self.params["weight"] = Parameter(W)
        if bias:
            self.params["bias"] = Parameter(np.zeros(n_out))

    def forward(self, x):
        self._cache = x
        y = x @ self.params["weight"].value
        if "bias" in self.params:
            y = y + self.params["bias"].value
        return y

    def backward(self, g):
        x = self._pop_cache()
        self.params["weight"].grad += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if "bias" in self.params:
            self.params["bias"].grad += g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g @ self.params["weight"].value.T


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.children[str(i)] = layer

    @property
    def layers(self):
        return list(self.children.values())

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.size
    loss = -np.take_along_axis(logp, labels[..., None], axis=-1).sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, axis=-1)
    return float(loss), grad / n


class SGD:
    """Momentum SGD: ``v <- mu v + g; p <- p - lr v``."""

    def __init__(self, parameters, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.parameters = list(parameters)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.parameters]

    def step(self):
        for p, v in zip(self.parameters, self.velocity):
            g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.value -= self.lr * v

    def zero_grad(self):
        for p in self.parameters:
            p.grad[...] = 0.0
