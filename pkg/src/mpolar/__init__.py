"""Mueller polarimetric image processing toolkit.

Converts 16-channel polarisation-state intensity tensors into scalar
parameter maps (diattenuation, depolarisation, retardance, azimuth) and
denoises single-shot acquisitions with classic filters or a single-pass
reverse-diffusion step.  Hot kernels run through a compiled extension when
available, with a pure-numpy fallback.
"""

from .backend import HAVE_COMPILED, active_backend, set_backend

__version__ = "0.1.0"

__all__ = ["HAVE_COMPILED", "active_backend", "set_backend", "__version__"]
