"""Ragged kernels for the latent-path gather and the attention heads.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected. Set ``CROSSVAE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as py

BACKEND = "python"
_impl = py

if os.environ.get("CROSSVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def compiled():
    """The compiled module, or None when it is unavailable."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


latent_gather_forward = _impl.latent_gather_forward
latent_gather_backward = _impl.latent_gather_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward

__all__ = [
    "BACKEND",
    "compiled",
    "py",
    "latent_gather_forward",
    "latent_gather_backward",
    "attention_forward",
    "attention_backward",
]
