"""Meta-learned PI auto-tuning: FOPTD and two-tank simulators, a numpy
autodiff engine, a recurrent PPO agent and its evaluation experiments."""

__version__ = "0.1.0"
