"""Stiff neural-ODE training with exact symbolic recovery.

Polynomial networks (pinet) define vector fields whose trained weights can be
read out as exact polynomial right-hand sides. Training fits one integration
step per data segment (train) using stiff single-step methods and the
integrating-factor Euler scheme (odeint), with gradients from a small
reverse-mode tape (autodiff) and a hand-rolled matrix exponential (matexp).
Benchmark problems and reference-data generation live in bench; the
command-line interface in cli.
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "bench",
    "cli",
    "densela",
    "matexp",
    "odeint",
    "pinet",
    "train",
]
