"""Plant model and identification data.

Samples start points on the 500 kJ kinetic-energy surface, rolls them out
with zero input and with random inputs, and prints what the data looks like.

    python3 demos/01_plant_and_data.py
"""
import numpy as np

from koopman_mpc import dataset as ds
from koopman_mpc.vehicle import VehicleParams, kinetic_energy, linearize

p = VehicleParams()

# Straight driving at 100 km/h sits on the surface.
print("energy at 27.735 m/s straight:", round(kinetic_energy((27.735, 0, 0), p)), "J")

gamma = ds.sample_gamma(5e5, p, n_base=200, densify_factor=3.0, seed=0)
side = ds.in_sideslip_region(gamma.points)
print(f"start points: {len(gamma)} ({side.sum()} with |vy| > |vx|)")

unc = ds.generate_uncontrolled(gamma, p)
ctl = ds.generate_controlled(gamma, p, seed=1)
print(f"uncontrolled: {len(unc)} trajectories, {unc.n_truncated} stopped early by the low-speed guard")
print(f"controlled:   {len(ctl)} trajectories, {ctl.n_truncated} stopped early")

# A sliding car sheds lateral speed on its own.
t = unc.trajectories[int(np.argmax(np.abs(unc.starts[:, 1])))]
print("largest |vy| start:", np.round(t.x0, 2), "->", np.round(t.states[-1], 2),
      f"after {t.K * t.Ts:.2f} s")

# The baseline controller's model: one linearisation at the trim point.
A, B, c = linearize((16.7, 0, 0), np.zeros(4), p, 0.01)
print("d vy / d delta_f per step at trim:", B[1, 2])
