"""Kernel selection: compiled extension when importable, pure Python otherwise.

Set ``LQGLAB_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("LQGLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels

csr_dijkstra = _impl.csr_dijkstra
loewner_tips = _impl.loewner_tips
loewner_forward = _impl.loewner_forward
