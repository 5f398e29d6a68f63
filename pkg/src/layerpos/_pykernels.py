"""Reference numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels`` with the same
signature and the same results up to floating point reassociation.
"""

import numpy as np


def lora_forward(H, W0, b, A, B, s):
    """Return ``(Z, HA)`` with ``Z = H W0^T + b + s (H A^T) B^T``."""
    HA = H @ A.T
    Z = H @ W0.T
    Z += b
    if s != 0.0:
        Z += s * (HA @ B.T)
    return Z, HA


def lora_backward(dZ, H, HA, W0, A, B, s, need_dH, need_dW, need_low=True):
    """Adjoints of :func:`lora_forward`.

    Returns ``(dH, dA, dB, ds, dW0, db)``; ``dH`` and the frozen-weight
    adjoints are ``None`` unless requested.  Without ``need_low`` the
    adapter adjoints come back as zeros.
    """
    dZB = dZ @ B
    if need_low:
        dA = s * (dZB.T @ H)
        dB = s * (dZ.T @ HA)
        ds = float(np.sum(dZB * HA))
    else:
        dA, dB, ds = np.zeros_like(A), np.zeros_like(B), 0.0
    dH = None
    if need_dH:
        dH = dZ @ W0
        if s != 0.0:
            dH += s * (dZB @ A)
    dW0 = db = None
    if need_dW:
        dW0 = dZ.T @ H
        db = dZ.sum(axis=0)
    return dH, dA, dB, ds, dW0, db


def normalize_rows_forward(E):
    """Return ``(U, norms)`` with each row of ``E`` scaled to unit length."""
    norms = np.sqrt(np.einsum("ij,ij->i", E, E))
    return E / norms[:, None], norms


def normalize_rows_backward(dU, U, norms):
    proj = np.einsum("ij,ij->i", dU, U)
    return (dU - U * proj[:, None]) / norms[:, None]


def cosine_rows_forward(D, t):
    """Cosine between each row of ``D`` and the vector ``t``.

    Returns ``(cos, norms)`` where ``norms`` holds the row norms of ``D``.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", D, D))
    tn = t / np.sqrt(t @ t)
    return (D @ tn) / norms, norms


def cosine_rows_backward(g, D, t, cos, norms):
    tn = t / np.sqrt(t @ t)
    inv = 1.0 / norms
    return g[:, None] * (tn[None, :] * inv[:, None] - D * (cos * inv * inv)[:, None])
