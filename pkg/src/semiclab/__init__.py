"""Numerical laboratory for semiclassical analysis.

Modules
-------
phasespace
    Hamiltonians, symplectic flows and their linearizations.
transforms
    h-Fourier, Wigner, Bargmann and Husimi transforms, moments.
quantization
    Weyl and left quantization on grids and operator checks.
wavepackets
    Gaussian packets and thawed propagation.
propagators
    Grid propagators, Gaussian integral propagators, Egorov evolution.
multilevel
    Two-level adiabatic transport and Landau-Zener surface hopping.
experiments, cli
    Run manifests, slope fits and the experiment catalog.
"""

__version__ = "0.1.0"
