"""p2nf: point-to-neural-field.

A hypernetwork maps a colored 3D point cloud to the full weight set of a
small radiance-field MLP; training compares differentiable volume renders
against posed images.  Subpackages: autodiff (reverse-mode engine), cameras,
field, render, hypernet, trainer, meshing, metrics, synthdata, cli.

Submodules are imported lazily so the CLI can cap BLAS thread pools before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "cameras",
    "field",
    "render",
    "hypernet",
    "trainer",
    "meshing",
    "metrics",
    "synthdata",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module 'p2nf' has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
