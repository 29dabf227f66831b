"""Band-limited harmonic analysis on S^2 and SO(3).

Conventions, fixed package-wide:

* ZYZ Euler angles, ``R = Rz(alpha) @ Ry(beta) @ Rz(gamma)``.
* ``D^l_{mn}(alpha, beta, gamma) = exp(-i m alpha) d^l_{mn}(beta) exp(-i n gamma)``
  with ``d^l_{mn}(beta) = <l m| exp(-i beta J_y) |l n>``.
* ``Y_l^m(theta, phi) = sqrt((2l+1)/(4 pi)) exp(i m phi) d^l_{m0}(theta)``
  (Condon-Shortley phase).  With these choices a rotated sphere signal
  ``f(R^-1 x)`` has coefficients ``D^l(R) @ f_l`` and a left-translated
  rotation signal ``h(R^-1 g)`` has coefficients ``conj(D^l(R)) @ h_l``.
* SO(3) synthesis is ``f = sum F^l_{mn} D^l_{mn}``; analysis carries the
  ``(2l+1) / (8 pi^2)`` factor.

The fast transforms separate variables (DFT in the azimuthal angles, Wigner-d
sums in the polar angle); the ``direct`` variants build dense basis matrices
and serve as the reference implementation for small bandwidths.
"""

from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .errors import ShapeError
from .signals import (
    HAAR_VOLUME,
    S2Spectrum,
    SO3Grid,
    SO3Signal,
    SO3Spectrum,
    SphereGrid,
    SphericalSignal,
    azimuth_nodes,
    polar_nodes,
    polar_weights,
)

IMAG_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# rotations and Euler angles


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def rot_y(b):
    c, s = np.cos(b), np.sin(b)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def euler_to_matrix(alpha, beta, gamma):
    alpha, beta, gamma = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (alpha, beta, gamma)))
    return rot_z(alpha) @ rot_y(beta) @ rot_z(gamma)


def matrix_to_euler(R):
    """ZYZ angles of rotation matrices ``R`` (shape (..., 3, 3)).

    At the poles (sin(beta) ~ 0) gamma is set to zero.
    """
    R = np.asarray(R, dtype=float)
    sb = np.hypot(R[..., 0, 2], R[..., 1, 2])
    beta = np.arctan2(sb, R[..., 2, 2])
    alpha = np.arctan2(R[..., 1, 2], R[..., 0, 2])
    gamma = np.arctan2(R[..., 2, 1], -R[..., 2, 0])
    pole = sb < 1e-12
    if np.any(pole):
        north = R[..., 2, 2] > 0
        a_n = np.arctan2(R[..., 1, 0], R[..., 0, 0])
        a_s = np.arctan2(-R[..., 1, 0], -R[..., 0, 0])
        alpha = np.where(pole, np.where(north, a_n, a_s), alpha)
        gamma = np.where(pole, 0.0, gamma)
        beta = np.where(pole, np.where(north, 0.0, np.pi), beta)
    return alpha, beta, gamma


# ---------------------------------------------------------------------------
# Wigner matrices


def _wigner_seed(l0, m, n, beta):
    """Closed-form d^{l0}_{mn}(beta) at l0 = max(|m|, |n|) (a single term)."""
    s = np.maximum(0, n - m)
    logc = 0.5 * (gammaln(l0 + m + 1) + gammaln(l0 - m + 1) + gammaln(l0 + n + 1) + gammaln(l0 - n + 1))
    logc -= gammaln(l0 + n - s + 1) + gammaln(s + 1) + gammaln(m - n + s + 1) + gammaln(l0 - m - s + 1)
    sign = np.where((m - n + s) % 2 == 0, 1.0, -1.0)
    half = np.asarray(beta, dtype=float)[..., None, None] / 2
    pc = (2 * l0 + n - m - 2 * s).astype(float)
    ps = (m - n + 2 * s).astype(float)
    return sign * np.exp(logc) * np.power(np.cos(half), pc) * np.power(np.sin(half), ps)


def wigner_d_table(B, beta):
    """All small-d matrices up to degree B - 1.

    Returns an array of shape ``beta.shape + (B, 2B-1, 2B-1)`` with
    ``out[..., l, m + B - 1, n + B - 1] = d^l_{mn}(beta)`` (zero if |m| or
    |n| exceeds l), computed by the three-term recursion in l seeded at
    ``l = max(|m|, |n|)``.
    """
    beta = np.asarray(beta, dtype=float)
    ms = np.arange(-(B - 1), B)
    m = ms[:, None] + np.zeros_like(ms)[None, :]
    n = ms[None, :] + np.zeros_like(ms)[:, None]
    l0 = np.maximum(np.abs(m), np.abs(n))
    seed = _wigner_seed(l0, m, n, beta)
    cb = np.cos(beta)[..., None, None]
    out = np.zeros(beta.shape + (B, 2 * B - 1, 2 * B - 1))
    prev2 = np.zeros(beta.shape + m.shape)
    prev1 = np.zeros(beta.shape + m.shape)
    mm, nn = m.astype(float) ** 2, n.astype(float) ** 2
    for l in range(B):
        cur = np.where(l0 == l, seed, 0.0)
        if l >= 1:
            L = l - 1
            grow = l0 < l
            a = np.where(grow, (L + 1) * (2 * L + 1) / np.sqrt(np.where(grow, ((L + 1) ** 2 - mm) * ((L + 1) ** 2 - nn), 1.0)), 0.0)
            if L > 0:
                b = m * n / (L * (L + 1))
                c = np.sqrt(np.clip((L * L - mm) * (L * L - nn), 0, None)) / (L * (2 * L + 1))
            else:
                b = np.zeros_like(mm)
                c = np.zeros_like(mm)
            cur = np.where(grow, a * ((cb - b) * prev1 - c * prev2), cur)
        out[..., l, :, :] = cur
        prev2, prev1 = prev1, cur
    return out


def wigner_d(l, beta):
    """Wigner small-d matrix ``d^l(beta)`` of shape (2l+1, 2l+1), rows m = -l..l."""
    if l < 0:
        raise ValueError("degree must be non-negative")
    table = wigner_d_table(l + 1, beta)
    return table[..., l, :, :]


def wigner_D(l, R):
    """Wigner D-matrix ``D^l(R)`` for rotation matrices ``R``."""
    a, b, g = matrix_to_euler(R)
    d = wigner_d(l, b)
    ms = np.arange(-l, l + 1)
    ea = np.exp(-1j * np.multiply.outer(a, ms))
    eg = np.exp(-1j * np.multiply.outer(g, ms))
    return ea[..., :, None] * d * eg[..., None, :]


def wigner_D_table(B, R):
    """Padded D matrices for all degrees < B: shape (..., B, 2B-1, 2B-1)."""
    a, b, g = matrix_to_euler(R)
    d = wigner_d_table(B, b)
    ms = np.arange(-(B - 1), B)
    ea = np.exp(-1j * np.multiply.outer(a, ms))
    eg = np.exp(-1j * np.multiply.outer(g, ms))
    return ea[..., None, :, None] * d * eg[..., None, None, :]


# ---------------------------------------------------------------------------
# spherical harmonics


def sph_harm_table(B, theta, phi):
    """``Y[..., l, m + B - 1]`` for all l < B at the given angles."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    d = wigner_d_table(B, theta)[..., :, :, B - 1]
    ls = np.arange(B)
    norm = np.sqrt((2 * ls + 1) / (4 * np.pi))
    ms = np.arange(-(B - 1), B)
    return norm[:, None] * d * np.exp(1j * np.multiply.outer(phi, ms))[..., None, :]


def directions_to_angles(v):
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    z = np.where(r > 0, v[..., 2] / np.where(r > 0, r, 1), 1.0)
    return np.arccos(np.clip(z, -1, 1)), np.arctan2(v[..., 1], v[..., 0])


def sph_harm_at(B, directions):
    """Spherical harmonics evaluated at unit vectors, shape (..., B, 2B-1)."""
    theta, phi = directions_to_angles(directions)
    return sph_harm_table(B, theta, phi)


@lru_cache(maxsize=None)
def real_basis(B):
    """Unitary maps from complex to real spherical harmonics, padded (B, 2B-1, 2B-1).

    Row ``a`` (real index) of block l gives ``Y^R_{l a} = sum_m U[l, a, m] Y_l^m``.
    """
    U = np.zeros((B, 2 * B - 1, 2 * B - 1), dtype=complex)
    o = B - 1
    h = 1 / np.sqrt(2)
    for l in range(B):
        U[l, o, o] = 1.0
        for a in range(1, l + 1):
            U[l, o + a, o - a] = h
            U[l, o + a, o + a] = (-1) ** a * h
            U[l, o - a, o - a] = 1j * h
            U[l, o - a, o + a] = -1j * (-1) ** a * h
    U.setflags(write=False)
    return U


def s2_real_to_complex(a, B):
    """Real-harmonic coefficients ``a[..., l, a]`` -> complex ``F[..., l, m]``."""
    return np.einsum("...la,lam->...lm", a, real_basis(B))


def so3_real_to_complex(A, B):
    """Real blocks ``A[..., l, a, b]`` -> complex ``F_l = U_l^H A_l U_l`` (a real SO(3) function)."""
    U = real_basis(B)
    return np.einsum("lam,...lab,lbn->...lmn", U.conj(), A, U)


# ---------------------------------------------------------------------------
# S^2 transforms


@lru_cache(maxsize=None)
def _s2_tables(B):
    theta = polar_nodes(B)
    d0 = wigner_d_table(B, theta)[:, :, :, B - 1]  # (a, l, m)
    ls = np.arange(B)
    norm = np.sqrt((2 * ls + 1) / (4 * np.pi))
    legendre = norm[None, :, None] * d0  # (a, l, m)
    ms = np.arange(-(B - 1), B)
    E = np.exp(1j * np.outer(azimuth_nodes(B), ms))  # (b, m): exp(i m phi_b)
    wt = polar_weights(B) * (2 * np.pi / (2 * B))
    for arr in (legendre, E):
        arr.setflags(write=False)
    return legendre, E, wt


def s2_synthesize(F, B):
    """Complex synthesis ``f(a, b) = sum F_lm Y_lm`` on the grid, shape (..., 2B, 2B)."""
    leg, E, _ = _s2_tables(B)
    G = np.einsum("...lm,alm->...am", F, leg)
    return G @ E.T


def s2_synthesize_adjoint(g, B):
    leg, E, _ = _s2_tables(B)
    H = np.asarray(g) @ E.conj()
    return np.einsum("...am,alm->...lm", H, leg)


def s2_analyze(f, B):
    """Quadrature analysis of grid samples (..., 2B, 2B) -> padded coefficients (..., B, 2B-1)."""
    _, _, wt = _s2_tables(B)
    return s2_synthesize_adjoint(np.asarray(f) * wt[:, None], B)


def _check_real(z, what="signal"):
    if z.size and np.max(np.abs(z.imag)) > IMAG_TOLERANCE * max(1.0, np.max(np.abs(z.real))):
        raise ValueError(f"{what} has an imaginary residue above {IMAG_TOLERANCE}; spectrum is not of a real signal")
    return z.real


def sht_forward(signal):
    """Spherical harmonic coefficients of a grid signal."""
    B = signal.grid.bandwidth
    return S2Spectrum(B, s2_analyze(signal.values, B))


def sht_inverse(spectrum, grid):
    """Pointwise synthesis of a spectrum on ``grid``; the result must be real."""
    if spectrum.bandwidth != grid.bandwidth:
        raise ShapeError(f"spectrum bandwidth {spectrum.bandwidth} does not match grid bandwidth {grid.bandwidth}")
    values = _check_real(s2_synthesize(spectrum.coeffs, grid.bandwidth))
    return SphericalSignal(grid, values)


@lru_cache(maxsize=None)
def _s2_dense(B):
    grid = SphereGrid.build(B)
    Y = sph_harm_table(B, grid.theta[:, None], grid.phi[None, :])  # (a, b, l, m)
    return Y, grid.quadrature_weights


def sht_forward_direct(signal):
    """Reference analysis by explicit summation against every Y_lm."""
    B = signal.grid.bandwidth
    Y, w = _s2_dense(B)
    coeffs = np.einsum("cab,ab,ablm->clm", signal.values, w, Y.conj())
    return S2Spectrum(B, coeffs)


def sht_inverse_direct(spectrum, grid):
    if spectrum.bandwidth != grid.bandwidth:
        raise ShapeError("bandwidth mismatch")
    Y, _ = _s2_dense(grid.bandwidth)
    return SphericalSignal(grid, _check_real(np.einsum("clm,ablm->cab", spectrum.coeffs, Y)))


def rotate_s2_coeffs(F, R, B):
    """Coefficients of ``f(R^-1 x)``: each degree block multiplied by D^l(R)."""
    D = wigner_D_table(B, R)
    return np.einsum("lmn,...ln->...lm", D, F)


# ---------------------------------------------------------------------------
# SO(3) transforms


@lru_cache(maxsize=None)
def _so3_tables(B):
    d = wigner_d_table(B, polar_nodes(B))  # (k, l, m, n)
    M = 2 * B - 1
    dT = np.ascontiguousarray(d.reshape(2 * B, B, M * M).transpose(2, 1, 0))  # (mn, l, k)
    ms = np.arange(-(B - 1), B)
    E = np.exp(-1j * np.outer(azimuth_nodes(B), ms))  # (i, m): exp(-i m alpha_i)
    ls = np.arange(B)
    scale = (2 * ls + 1) / HAAR_VOLUME
    wk = polar_weights(B) * (2 * np.pi / (2 * B)) ** 2
    for arr in (dT, E, scale, wk):
        arr.setflags(write=False)
    return dT, E, scale, wk


def so3_synthesize_complex(F, B):
    """``f(i, k, j) = sum_lmn F[l,m,n] D^l_mn(alpha_i, beta_k, gamma_j)``; shape (..., 2B, 2B, 2B)."""
    dT, E, _, _ = _so3_tables(B)
    F = np.asarray(F)
    lead = F.shape[:-3]
    M = 2 * B - 1
    P = int(np.prod(lead, dtype=int))
    Ft = F.reshape(P, B, M * M).transpose(2, 0, 1)  # (mn, P, l)
    G = np.matmul(Ft, dT)  # (mn, P, k)
    G = G.reshape(M, M, P, 2 * B)
    A = np.tensordot(G, E, axes=([1], [1]))  # (m, P, k, j)
    X = np.tensordot(E, A, axes=([1], [0]))  # (i, P, k, j)
    return np.moveaxis(X, 0, 1).reshape(lead + (2 * B,) * 3)


def so3_synthesize_adjoint(g, B):
    """Adjoint of :func:`so3_synthesize_complex` (no quadrature weights)."""
    dT, E, _, _ = _so3_tables(B)
    g = np.asarray(g)
    lead = g.shape[:-3]
    M = 2 * B - 1
    P = int(np.prod(lead, dtype=int))
    g = g.reshape((P,) + (2 * B,) * 3)
    H = np.tensordot(g, E.conj(), axes=([3], [0]))  # (P, i, k, n)
    H = np.tensordot(E.conj(), H, axes=([0], [1]))  # (m, P, k, n)
    H = H.transpose(0, 3, 1, 2).reshape(M * M, P, 2 * B)  # (mn, P, k)
    F = np.matmul(H, dT.transpose(0, 2, 1))  # (mn, P, l)
    return F.transpose(1, 2, 0).reshape(lead + (B, M, M))


def so3_synthesize_values(F, B):
    return so3_synthesize_complex(F, B).real


def so3_analyze_values(x, B):
    """Quadrature analysis of real grid samples (..., 2B, 2B, 2B)."""
    _, _, scale, wk = _so3_tables(B)
    F = so3_synthesize_adjoint(np.asarray(x) * wk[:, None], B)
    return F * scale[:, None, None]


def so3_analyze_adjoint(G, B):
    """Adjoint of :func:`so3_analyze_values` as a map into real grid values."""
    _, _, scale, wk = _so3_tables(B)
    return so3_synthesize_complex(np.asarray(G) * scale[:, None, None], B).real * wk[:, None]


def so3_synthesize(spectrum, grid):
    """Synthesize an :class:`SO3Spectrum` on ``grid`` (result must be real)."""
    if spectrum.bandwidth != grid.bandwidth:
        raise ShapeError(f"spectrum bandwidth {spectrum.bandwidth} does not match grid bandwidth {grid.bandwidth}")
    values = _check_real(so3_synthesize_complex(spectrum.coeffs, grid.bandwidth), "SO(3) signal")
    return SO3Signal(grid, values)


def so3_analyze(signal):
    B = signal.grid.bandwidth
    return SO3Spectrum(B, so3_analyze_values(signal.values, B))


@lru_cache(maxsize=None)
def _so3_dense(B):
    grid = SO3Grid.build(B)
    D = wigner_D_table(B, grid.rotations())  # (i, k, j, l, m, n)
    return D, grid.weights


def so3_synthesize_direct(spectrum, grid):
    if spectrum.bandwidth != grid.bandwidth:
        raise ShapeError("bandwidth mismatch")
    D, _ = _so3_dense(grid.bandwidth)
    return SO3Signal(grid, _check_real(np.einsum("clmn,ikjlmn->cikj", spectrum.coeffs, D), "SO(3) signal"))


def so3_analyze_direct(signal):
    B = signal.grid.bandwidth
    D, w = _so3_dense(B)
    scale = (2 * np.arange(B) + 1) / HAAR_VOLUME
    F = np.einsum("cikj,ikj,ikjlmn->clmn", signal.values, w, D.conj()) * scale[:, None, None]
    return SO3Spectrum(B, F)


def rotate_so3_coeffs(F, R, B):
    """Coefficients of the left translate ``h(R^-1 g)``: blocks multiplied by conj(D^l(R))."""
    D = wigner_D_table(B, R)
    return np.einsum("lmk,...lkn->...lmn", D.conj(), F)


def so3_evaluate(F, R, B):
    """Evaluate ``sum F D(R)`` at arbitrary rotations R (..., 3, 3)."""
    D = wigner_D_table(B, R)
    return np.einsum("...lmn,clmn->...c", D, F)


def s2_energy(F):
    return np.sum(np.abs(F) ** 2, axis=(-2, -1))


def so3_energy(F, B):
    """Spectral energy matching the Haar-weighted grid energy."""
    scale = HAAR_VOLUME / (2 * np.arange(B) + 1)
    return np.einsum("...lmn,l->...", np.abs(F) ** 2, scale)
