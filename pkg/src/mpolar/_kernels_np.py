"""Pure-numpy reference kernels; contract-identical to the compiled ones.

All heavy math runs in float64 regardless of the container dtype, then is
cast back, so both backends deliver the same accuracy class.  These kernels
are single-threaded; the compiled backend owns the multicore path.
"""

from __future__ import annotations

import numpy as np

_DEGENERATE_DET = 1e-12
_D_MAX = 1.0 - 1e-9


def solve_mueller(intensities: np.ndarray, ainv: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Per-pixel Ainv @ I4 @ Ginv for (H, W, 16) intensities."""
    h, w, _ = intensities.shape
    pix = intensities.reshape(h, w, 4, 4).astype(np.float64, copy=False)
    if ainv.ndim == 2:
        out = np.einsum("ij,hwjk,kl->hwil", ainv, pix, ginv, optimize=True)
    else:
        out = np.einsum("hwij,hwjk,hwkl->hwil", ainv, pix, ginv, optimize=True)
    return out.astype(intensities.dtype, copy=False)


def forward_mueller(mueller: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-pixel A @ M @ G flattened back to 16 channels."""
    h, w = mueller.shape[:2]
    m = mueller.astype(np.float64, copy=False)
    if a.ndim == 2:
        out = np.einsum("ij,hwjk,kl->hwil", a, m, g, optimize=True)
    else:
        out = np.einsum("hwij,hwjk,hwkl->hwil", a, m, g, optimize=True)
    return out.reshape(h, w, 16).astype(mueller.dtype, copy=False)


def _eigvals_sym3_desc(s: np.ndarray) -> np.ndarray:
    """Closed-form (trigonometric) eigenvalues of symmetric 3x3 stacks.

    Returns (..., 3) sorted descending, clipped at zero (inputs are PSD
    Gram matrices up to rounding).
    """
    s11 = s[..., 0, 0]
    s22 = s[..., 1, 1]
    s33 = s[..., 2, 2]
    s12 = s[..., 0, 1]
    s13 = s[..., 0, 2]
    s23 = s[..., 1, 2]

    p1 = s12**2 + s13**2 + s23**2
    q = (s11 + s22 + s33) / 3.0
    p2 = (s11 - q) ** 2 + (s22 - q) ** 2 + (s33 - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))

    safe_p = np.where(p > 0.0, p, 1.0)
    b11 = (s11 - q) / safe_p
    b22 = (s22 - q) / safe_p
    b33 = (s33 - q) / safe_p
    b12 = s12 / safe_p
    b13 = s13 / safe_p
    b23 = s23 / safe_p
    detb = (
        b11 * (b22 * b33 - b23 * b23)
        - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13)
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    theta = np.arccos(r) / 3.0

    lam1 = q + 2.0 * p * np.cos(theta)
    lam3 = q + 2.0 * p * np.cos(theta + 2.0 * np.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    lams = np.stack([lam1, lam2, lam3], axis=-1)
    return np.clip(lams, 0.0, None)


def _det3(m: np.ndarray) -> np.ndarray:
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def _inv3(m: np.ndarray, det: np.ndarray) -> np.ndarray:
    """Adjugate-based 3x3 inverse; caller guarantees det is away from zero."""
    inv = np.empty_like(m)
    inv[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    inv[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    inv[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    inv[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    inv[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    inv[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    inv[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    inv[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    inv[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return inv / det[..., None, None]


def decompose_lu_chipman(mueller: np.ndarray, valid: np.ndarray):
    """Vectorised diattenuator/retarder/depolariser factorisation.

    Expects the normalized (M11 = 1) field.  Returns
    (m_d, m_r, m_delta, sign, degenerate, d_clamped); pixels flagged
    degenerate carry identity retarder/depolariser blocks for the caller's
    pseudo-inverse pass.
    """
    m = mueller.astype(np.float64, copy=False)
    h, w = m.shape[:2]

    dvec = m[..., 0, 1:].copy()
    d2 = np.einsum("hwk,hwk->hw", dvec, dvec)
    d = np.sqrt(d2)
    d_clamped = d >= _D_MAX
    scale = np.where(d_clamped, _D_MAX / np.where(d > 0, d, 1.0), 1.0)
    dvec *= scale[..., None]
    d = np.minimum(d, _D_MAX)
    d2 = d * d

    a = np.sqrt(1.0 - d2)
    # P = dhat dhat^T as dvec dvec^T / d^2, guarded for d ~ 0
    outer = dvec[..., :, None] * dvec[..., None, :]
    safe_d2 = np.where(d2 > 1e-30, d2, 1.0)
    proj = np.where((d2 > 1e-30)[..., None, None], outer / safe_d2[..., None, None], 0.0)
    eye3 = np.eye(3)
    small_md = a[..., None, None] * eye3 + (1.0 - a)[..., None, None] * proj

    m_d = np.zeros((h, w, 4, 4))
    m_d[..., 0, 0] = 1.0
    m_d[..., 0, 1:] = dvec
    m_d[..., 1:, 0] = dvec
    m_d[..., 1:, 1:] = small_md

    # Closed-form inverse of the diattenuator
    inv_k = 1.0 / (1.0 - d2)
    md_inv = np.zeros((h, w, 4, 4))
    md_inv[..., 0, 0] = inv_k
    md_inv[..., 0, 1:] = -dvec * inv_k[..., None]
    md_inv[..., 1:, 0] = -dvec * inv_k[..., None]
    md_inv[..., 1:, 1:] = (1.0 / a)[..., None, None] * (eye3 - proj) + proj * inv_k[
        ..., None, None
    ]

    m_prime = np.einsum("hwij,hwjk->hwik", m, md_inv, optimize=True)
    small = m_prime[..., 1:, 1:]
    p_delta = m_prime[..., 1:, 0]

    gram = np.einsum("hwij,hwkj->hwik", small, small, optimize=True)
    lams = _eigvals_sym3_desc(gram)
    det_small = _det3(small)
    sign = np.where(det_small < 0.0, -1, 1).astype(np.int8)
    degenerate = (np.abs(det_small) < _DEGENERATE_DET) & valid
    fast = valid & ~degenerate

    sq1 = np.sqrt(lams[..., 0])
    sq2 = np.sqrt(lams[..., 1])
    sq3 = np.sqrt(lams[..., 2])
    kappa = sq1 * sq2 + sq2 * sq3 + sq3 * sq1
    sigma = sq1 + sq2 + sq3
    tau = sq1 * sq2 * sq3

    bracket = gram + kappa[..., None, None] * eye3
    det_bracket = _det3(bracket)
    ok = fast & (np.abs(det_bracket) > 0)
    bracket_inv = _inv3(bracket, np.where(ok, det_bracket, 1.0))
    rhs = sigma[..., None, None] * gram + tau[..., None, None] * eye3
    small_delta = sign[..., None, None] * np.einsum(
        "hwij,hwjk->hwik", bracket_inv, rhs, optimize=True
    )
    small_delta = np.where(ok[..., None, None], small_delta, eye3)

    det_delta = _det3(small_delta)
    inv_ok = ok & (np.abs(det_delta) > _DEGENERATE_DET)
    small_delta_inv = _inv3(small_delta, np.where(inv_ok, det_delta, 1.0))
    small_r = np.einsum("hwij,hwjk->hwik", small_delta_inv, small, optimize=True)
    small_r = np.where(inv_ok[..., None, None], small_r, eye3)
    degenerate = degenerate | (valid & ~inv_ok)

    m_delta = np.zeros((h, w, 4, 4))
    m_delta[..., 0, 0] = 1.0
    m_delta[..., 1:, 0] = p_delta
    m_delta[..., 1:, 1:] = small_delta

    m_r = np.zeros((h, w, 4, 4))
    m_r[..., 0, 0] = 1.0
    m_r[..., 1:, 1:] = small_r

    dtype = mueller.dtype
    return (
        m_d.astype(dtype, copy=False),
        m_r.astype(dtype, copy=False),
        m_delta.astype(dtype, copy=False),
        sign,
        degenerate,
        d_clamped,
    )
