"""Kernel backend selection.

The tensor engine dispatches its hot inner kernels through `active`, which
points at either the compiled extension (_fastcore, built from Cython) or
the numpy fallback (pure). The compiled core is preferred when importable;
set SEMCAP_KERNELS=pure to force the fallback, or call use() to switch at
runtime (the benchmark does this to compare backends in one process).
"""

import os

from . import pure

try:
    from . import _fastcore as fast
except ImportError:
    fast = None

_BACKENDS = {"pure": pure}
if fast is not None:
    _BACKENDS["fast"] = fast

_env = os.environ.get("SEMCAP_KERNELS")
if _env is not None and _env not in _BACKENDS:
    raise ImportError(
        f"SEMCAP_KERNELS={_env!r} not available; choices: {sorted(_BACKENDS)}")

active = _BACKENDS[_env] if _env else _BACKENDS.get("fast", pure)


def backend_name():
    return active.NAME


def available_backends():
    return sorted(_BACKENDS)


def use(name):
    """Switch the active backend; returns the previous backend name."""
    global active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; "
                         f"choices: {sorted(_BACKENDS)}")
    prev = active.NAME
    active = _BACKENDS[name]
    return prev
