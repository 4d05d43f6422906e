"""Constructors for ideal polarimetric elements, broadcastable over pixels.

Angle arguments are in degrees; axis angles are axial (period 180).  The
retarder convention matches the azimuth extraction used downstream: for a
linear retarder of retardance delta at axis theta, element (2,4) is
sin(2 theta) sin(delta) and element (4,3) is cos(2 theta) sin(delta).
"""

from __future__ import annotations

import numpy as np


def _out(shape_prefix):
    out = np.zeros(shape_prefix + (4, 4))
    return out


def linear_retarder(delta_deg, axis_deg) -> np.ndarray:
    """Mueller matrix (stack) of a linear retarder."""
    delta = np.deg2rad(np.asarray(delta_deg, dtype=np.float64))
    theta2 = 2.0 * np.deg2rad(np.asarray(axis_deg, dtype=np.float64))
    delta, theta2 = np.broadcast_arrays(delta, theta2)
    c = np.cos(theta2)
    s = np.sin(theta2)
    cd = np.cos(delta)
    sd = np.sin(delta)

    m = _out(delta.shape)
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = c * c + s * s * cd
    m[..., 1, 2] = c * s * (1.0 - cd)
    m[..., 1, 3] = s * sd
    m[..., 2, 1] = c * s * (1.0 - cd)
    m[..., 2, 2] = c * c * cd + s * s
    m[..., 2, 3] = -c * sd
    m[..., 3, 1] = -s * sd
    m[..., 3, 2] = c * sd
    m[..., 3, 3] = cd
    return m


def diattenuator_from_vector(dvec) -> np.ndarray:
    """Normalized diattenuator for a (..., 3) diattenuation vector, |d| < 1."""
    d = np.asarray(dvec, dtype=np.float64)
    mag2 = np.einsum("...k,...k->...", d, d)
    mag = np.sqrt(mag2)
    if np.any(mag >= 1.0):
        raise ValueError("diattenuation magnitude must be < 1")
    a = np.sqrt(1.0 - mag2)
    safe = np.where(mag2 > 0, mag2, 1.0)
    proj = np.where(
        (mag2 > 0)[..., None, None], d[..., :, None] * d[..., None, :] / safe[..., None, None], 0.0
    )
    m = _out(d.shape[:-1])
    m[..., 0, 0] = 1.0
    m[..., 0, 1:] = d
    m[..., 1:, 0] = d
    m[..., 1:, 1:] = a[..., None, None] * np.eye(3) + (1.0 - a)[..., None, None] * proj
    return m


def linear_diattenuator(magnitude, axis_deg) -> np.ndarray:
    """Diattenuator with in-plane axis; magnitude in [0, 1)."""
    mag = np.asarray(magnitude, dtype=np.float64)
    theta2 = 2.0 * np.deg2rad(np.asarray(axis_deg, dtype=np.float64))
    mag, theta2 = np.broadcast_arrays(mag, theta2)
    d = np.stack([mag * np.cos(theta2), mag * np.sin(theta2), np.zeros_like(mag)], axis=-1)
    return diattenuator_from_vector(d)


def diagonal_depolarizer(diag3) -> np.ndarray:
    """Depolariser diag(1, a, b, c) with zero polarizance."""
    d = np.asarray(diag3, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError("expected 3 diagonal entries")
    m = _out(d.shape[:-1])
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = d[..., 0]
    m[..., 2, 2] = d[..., 1]
    m[..., 3, 3] = d[..., 2]
    return m


def compose(*factors: np.ndarray) -> np.ndarray:
    """Left-to-right matrix product of broadcastable (..., 4, 4) stacks."""
    out = factors[0]
    for f in factors[1:]:
        out = out @ f
    return out


def tetrahedral_states_calibration(scale: float = 1.0):
    """Well-conditioned synthetic analyser/generator pair.

    Generator columns are fully polarized Stokes states on the corners of a
    regular tetrahedron; analyser rows are the matching projection vectors.
    Physical Mueller inputs then yield intensities within [0, scale].
    """
    verts = np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    ) / np.sqrt(3.0)
    generator = np.concatenate([np.ones((4, 1)), verts], axis=1).T
    analyser = 0.5 * scale * np.concatenate([np.ones((4, 1)), verts], axis=1)
    return analyser, generator
