"""Desk-scale workbench for stochastic sequence-bottleneck inverse reconstruction.

Cardiac transmembrane potential (TMP) sequences are simulated with a
two-variable reaction-diffusion model on a planar lattice heart, projected to
surface-lead potentials through a geometry-dependent linear operator, and
reconstructed with LSTM encoder-decoder networks trained under a variational
information-bottleneck objective.  Generalization experiments (pathology
shift, geometry rotation, bottleneck-weight sweeps) and flatness/gap
diagnostics run from the command line and emit CSV/JSON reports.
"""

__version__ = "0.1.0"
