import numpy as np
import pytest

from volrep import tensor
from volrep.synth import GenConfig, LesionType


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    prev = tensor.get_default_dtype()
    yield
    tensor.set_default_dtype(prev)


@pytest.fixture
def f64():
    with tensor.use_dtype(np.float64):
        yield


def small_gen_config(dims=(16, 16, 8), patch_dims=(8, 8, 4), **kw):
    """Generator config with lesions scaled to fit small test volumes."""
    types = (
        LesionType("nodule", (1.4, 2.0), 0.8, (600.0, 900.0)),
        LesionType("mass", (2.4, 3.0), 0.7, (600.0, 900.0)),
        LesionType("band", (1.2, 1.6), 1.0, (550.0, 850.0), elongated=True),
        LesionType("haze", (2.4, 3.2), 0.7, (450.0, 600.0)),
    )
    return GenConfig(dims=dims, patch_dims=patch_dims, types=types, **kw)
