import pytest

import nslogic._pykernels as _pyk

_BACKENDS = {"pure": _pyk}
try:
    import nslogic._native as _nat

    if getattr(_nat, "BACKEND", None) == "native":
        _BACKENDS["native"] = _nat
except ImportError:
    pass


@pytest.fixture(params=sorted(_BACKENDS))
def kern(request):
    """Kernel backend under test; parametrizes over pure and compiled."""
    return _BACKENDS[request.param]


def all_backends():
    return dict(_BACKENDS)
