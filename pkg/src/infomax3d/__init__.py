"""Self-supervised mutual-information pretraining for volumetric data.

Subsystems: a small reverse-mode autodiff engine (:mod:`autodiff`,
:mod:`nn`), volumetric encoder presets (:mod:`encoders`), JSD/NCE/DV
objectives (:mod:`objectives`), AMSGrad training regimes (:mod:`training`),
volume/manifest/split handling (:mod:`data`), balanced-accuracy and exact
Wilcoxon statistics (:mod:`evaluation`) and a CLI (:mod:`cli`).
"""

from .backend import kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
