"""Isometric embedding of 2-sphere metrics into null-cone geometries.

Subpackage map:

- atlas, fields, metric, calculus: discretized tensor calculus on the sphere
- pform: pointwise Lorentzian algebra of the trace bilinear form
- elliptic: the covector operators, kernel extraction, Fredholm solves
- cone: null-cone models (analytic and synthetic) and leaf propagation
- embed: the nonlinear perturbation solver (contraction mapping)
- continuation: paths of metrics -> paths of embeddings, flows
- foliation: uniformization, scaled embedding, asymptotic foliations
- cli: command-line front end
"""

__version__ = "0.1.0"
