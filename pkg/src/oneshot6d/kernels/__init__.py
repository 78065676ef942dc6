"""Hot kernels: compiled Cython implementation with a pure-numpy fallback.

The backend is selected once at import: the extension module if it built,
otherwise the numpy version. Set ONESHOT6D_PURE=1 to force the fallback
(used by the benchmark and by CI to cover both paths).
"""

import os

from . import py as _py

BACKEND = "python"
zbuffer_splat = _py.zbuffer_splat
col2im_add = _py.col2im_add

if os.environ.get("ONESHOT6D_PURE", "0") != "1":
    try:
        from . import _impl as _c

        zbuffer_splat = _c.zbuffer_splat
        col2im_add = _c.col2im_add
        BACKEND = "cython"
    except ImportError:
        pass

__all__ = ["zbuffer_splat", "col2im_add", "BACKEND"]
