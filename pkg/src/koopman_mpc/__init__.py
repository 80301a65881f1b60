"""Koopman-operator predictive control of a single-track vehicle.

Modules
-------
vehicle      plant model, RK4 step and linearisation
dataset      start points on an energy surface and rollouts
koopman      eigenfunction lifting and the linear predictor
qp           dense convex QP solver (operator splitting)
mpc          condensed MPC and the closed loop
experiments  pipeline steps and the drift/spiral scenarios
"""
from .koopman import KoopmanModel, identify, load_model, save_model
from .mpc import MpcConfig, koopman_controller, linear_controller, simulate_closed_loop
from .qp import QpProblem, QpSettings, solve
from .vehicle import VehicleParams, linearize, step

__all__ = [
    "KoopmanModel", "identify", "load_model", "save_model",
    "MpcConfig", "koopman_controller", "linear_controller", "simulate_closed_loop",
    "QpProblem", "QpSettings", "solve",
    "VehicleParams", "linearize", "step",
]
__version__ = "0.1.0"
