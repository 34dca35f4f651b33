"""steerlab: 2D workbench for inference-time steering of frozen imitation policies.

Core pieces: 2D worlds and demonstration generators, a trajectory diffusion
policy with six steering samplers, stable dynamical-system mode policies with
boundary modulation, a temporal-logic task automaton, a learned grounding
classifier, an evaluation bench, and an interactive steering service.
"""

__version__ = "0.1.0"
