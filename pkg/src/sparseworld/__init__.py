"""sparseworld: a world-model laboratory built around sparse hard attention.

Subpackages:
  diffcore   reverse-mode autodiff engine, Adam, reproducible RNG streams
  sim        deterministic 2D "Causal Balls" environment with ground-truth
             local causal graphs and an intervention catalogue
  model      sparse-attention dynamics model (and its dense twin)
  train      Lagrangian constrained training loops
  adapt      few-shot intervention-token adaptation
  evaluation graph/rollout/robustness/adaptation protocols and reports
  cli        command-line pipeline and persistent file formats
"""

__version__ = "0.1.0"
