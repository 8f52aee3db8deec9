"""microseg: hybrid CNN + shifted-window transformer segmentation in numpy.

The package is a self-contained study of transformer segmentation at desk
scale: a reverse-mode autodiff engine (``microseg.tensor``), shifted-window
attention blocks (``microseg.swin``), a small model zoo built from them
(``microseg.models``), class-balanced segmentation losses and metrics
(``microseg.losses``), an image tiling / pseudo-labeling pipeline
(``microseg.data``), and training loops with early stopping and reproducible
run records (``microseg.train``).
"""

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]

_LAZY = {"Tensor", "no_grad"}


def __getattr__(name):
    # Deferred so that `import microseg` stays numpy-free: the command-line
    # entry point must set BLAS thread caps before numpy first loads.
    if name in _LAZY:
        from microseg import tensor

        return getattr(tensor, name)
    raise AttributeError(f"module 'microseg' has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | _LAZY)
