"""Small dense linear-algebra helpers shared by the chain and posterior code.

Every function accepts stacked matrices with arbitrary leading batch axes.
"""

import numpy as np

# Degree-13 Pade coefficients and the norm bound below which no scaling is needed.
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_PADE13 = _PADE13 / _PADE13[0]
_THETA13 = 5.371920351148152

JITTER_START = 1e-10
JITTER_STOP = 1e-6


def expm(a):
    """Matrix exponential by scaling and squaring with a fixed degree-13 Pade approximant.

    Parameters
    ----------
    a : ndarray, shape (..., n, n)

    Returns
    -------
    ndarray, shape (..., n, n)
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    norms = np.abs(a).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(np.maximum(norms, 1e-300) / _THETA13))
    s = np.clip(s, 0, None).astype(int)
    scaled = a / (2.0 ** s)[..., None, None]

    b = _PADE13
    eye = np.broadcast_to(np.eye(n), scaled.shape)
    a2 = scaled @ scaled
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = scaled @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                  + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
    out = np.linalg.solve(v - u, v + u)

    for k in range(int(s.max(initial=0))):
        mask = s > k
        if out.ndim == 2:
            out = out @ out
        else:
            out[mask] = out[mask] @ out[mask]
    return out


def sym(s):
    """Symmetric part of a stack of square matrices."""
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def cholesky_jitter(s, start=JITTER_START, stop=JITTER_STOP):
    """Cholesky factor, adding relative diagonal jitter only when needed.

    The jitter is scaled by the mean absolute diagonal and grows tenfold from
    ``start`` to ``stop``. Raises ``numpy.linalg.LinAlgError`` if every attempt fails.
    """
    s = sym(np.asarray(s, dtype=float))
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    n = s.shape[-1]
    scale = np.maximum(np.abs(np.diagonal(s, axis1=-2, axis2=-1)).mean(axis=-1), 1e-300)
    jitter = start
    while jitter <= stop * (1 + 1e-9):
        try:
            return np.linalg.cholesky(s + (jitter * scale)[..., None, None] * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("matrix is not positive definite within jitter tolerance")


def is_psd(s):
    """Per-matrix test of positive (semi)definiteness under the jitter policy."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        try:
            cholesky_jitter(s)
            return True
        except np.linalg.LinAlgError:
            return False
    flat = s.reshape((-1,) + s.shape[-2:])
    ok = np.empty(len(flat), dtype=bool)
    for i, si in enumerate(flat):
        ok[i] = is_psd(si)
    return ok.reshape(s.shape[:-2])


def pd_mask(s):
    """Vectorised positive-definiteness mask via symmetric eigenvalues."""
    s = sym(np.asarray(s, dtype=float))
    eig = np.linalg.eigvalsh(s)
    scale = np.maximum(np.abs(eig).max(axis=-1), 1e-300)
    return eig.min(axis=-1) > -JITTER_STOP * scale


def psd_sqrt(s):
    """Symmetric square root of PSD matrices; negative rounding is clipped to zero."""
    s = sym(np.asarray(s, dtype=float))
    w, v = np.linalg.eigh(s)
    return (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(v, -1, -2)


def floored_inverse(q, floor):
    """Inverse of a symmetric matrix with eigenvalues clipped from below at ``floor``."""
    w, v = np.linalg.eigh(sym(q))
    w = np.maximum(w, floor)
    return (v / w[..., None, :]) @ np.swapaxes(v, -1, -2)


def times_site(mean, cov, lam1, lam2):
    """Multiply N(mean, cov) by exp(x'lam1 - x'lam2 x / 2) in moment form.

    Works for singular ``cov`` and for indefinite ``lam2`` as long as the
    product is normalisable.

    Returns
    -------
    new_mean, new_cov, log_integral
        ``log_integral`` is log of the integral of the product, i.e. the
        log expectation of the exponential factor under the Gaussian.
    """
    n = cov.shape[-1]
    g = np.eye(n) + cov @ lam2
    new_cov = sym(np.linalg.solve(g, cov))
    a = np.linalg.solve(g, mean[..., None])[..., 0]
    new_mean = a + (new_cov @ lam1[..., None])[..., 0]
    sign, logdet = np.linalg.slogdet(g)
    with np.errstate(invalid="ignore"):
        logdet = np.where(sign > 0, logdet, np.nan)
    quad = (np.einsum("...i,...ij,...j->...", lam1, new_cov, lam1)
            + 2.0 * np.einsum("...i,...i->...", lam1, a)
            - np.einsum("...i,...ij,...j->...", mean, lam2, a))
    return new_mean, new_cov, -0.5 * logdet + 0.5 * quad


def gauss_logpdf(x, mean, cov):
    """Log density of a multivariate normal, batched."""
    diff = x - mean
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, diff[..., None])[..., 0]
    n = cov.shape[-1]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return -0.5 * (np.sum(sol * sol, axis=-1) + logdet + n * np.log(2 * np.pi))
