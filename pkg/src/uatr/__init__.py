"""Underwater acoustic target recognition toolkit.

Speech-convention log-mel features, a numpy transformer encoder with exact
reverse-mode gradients, AdamW fine-tuning, the three evaluation protocols
(in-domain, variable-length zero-shot, cross-domain zero-shot), and a
deterministic two-domain synthetic corpus for desk-scale transfer
experiments.

Submodules import lazily so the CLI can configure threading before numpy
loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "audio", "checkpoint", "cli", "dsp", "errors", "evaluation", "ingest",
    "kernels", "nn", "optim", "pipeline", "synth",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
