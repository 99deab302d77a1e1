"""Adversarial examples for a Hopf-insulator phase classifier.

Submodules: :mod:`hopf` (model and datasets), :mod:`invariant` (lattice Hopf
index), :mod:`network` (numpy 3D CNN), :mod:`attacks`, :mod:`experiment`
(simulated NV-center preparation and tomography), :mod:`viz` (plot-ready
exports) and :mod:`cli`.
"""

__version__ = "0.1.0"
