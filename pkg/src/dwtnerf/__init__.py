"""Few-shot radiance fields supervised in the wavelet domain, on a small numpy autodiff engine."""

__version__ = "0.1.0"
