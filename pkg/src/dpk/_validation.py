"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np


class InvalidInputError(ValueError):
    """Input contains NaN/inf or has an unusable shape."""


def check_activation_matrix(x, min_rows: int = 1) -> np.ndarray:
    """Coerce ``x`` to a finite float64 matrix of shape (n, p).

    Tensors are detached and moved to the CPU. Higher-rank inputs are
    flattened per example, so a (B, C, H, W) feature map becomes (B, C*H*W).
    """
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        raise InvalidInputError("expected a 2-D (examples x features) array, got 1-D")
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[0] < min_rows:
        raise InvalidInputError(f"need at least {min_rows} examples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("activations contain NaN or inf")
    return x


def check_square_pair(k, l, min_n: int = 4, rtol: float = 1e-9):
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    for name, m in (("k", k), ("l", l)):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"{name} must be square, got shape {m.shape}")
        scale = max(np.abs(m).max(initial=0.0), 1.0)
        if not np.allclose(m, m.T, rtol=0.0, atol=rtol * scale):
            raise InvalidInputError(f"{name} is not symmetric")
    if k.shape != l.shape:
        raise InvalidInputError(f"shape mismatch: {k.shape} vs {l.shape}")
    if k.shape[0] < min_n:
        raise InvalidInputError(
            f"HSIC estimator needs n >= {min_n} examples, got {k.shape[0]}"
        )
    return k, l


def check_ratio(ratio: float) -> float:
    ratio = float(ratio)
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"ratio must lie in [0, 1], got {ratio}")
    return ratio


def check_images(X, y=None):
    """Validate an image batch for the estimators.

    Returns float32 (n, C, H, W) images and, when given, a 1-D label array.
    Numeric labels must be whole numbers; other label types pass through.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise InvalidInputError(f"expected (n, C, H, W) images, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("images contain NaN or inf")
    if y is None:
        return X
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise InvalidInputError(
            f"labels must be 1-D with {X.shape[0]} entries, got shape {y.shape}"
        )
    if np.issubdtype(y.dtype, np.floating) and not np.all(np.mod(y, 1) == 0):
        raise InvalidInputError("numeric labels must be whole numbers")
    return X, y
