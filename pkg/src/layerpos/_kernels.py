"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the
numpy implementation takes over.  Setting ``LAYERPOS_BACKEND=python``
forces the fallback and ``LAYERPOS_BACKEND=compiled`` makes a missing
extension an import error.
"""

import os

from . import _pykernels

_forced = os.environ.get("LAYERPOS_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _pykernels
        BACKEND = "python"

lora_forward = _impl.lora_forward
lora_backward = _impl.lora_backward
normalize_rows_forward = _impl.normalize_rows_forward
normalize_rows_backward = _impl.normalize_rows_backward
cosine_rows_forward = _impl.cosine_rows_forward
cosine_rows_backward = _impl.cosine_rows_backward

__all__ = [
    "BACKEND",
    "lora_forward",
    "lora_backward",
    "normalize_rows_forward",
    "normalize_rows_backward",
    "cosine_rows_forward",
    "cosine_rows_backward",
]
