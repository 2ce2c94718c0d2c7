"""Multiscale stochastic optimal control: homogenization, HJB solvers and Monte Carlo checks."""
