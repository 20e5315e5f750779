"""Desk-scale shared-autonomy workbench.

Simplified contact-rich assembly simulation under admittance control, a kNN
pilot surrogate, a residual PPO copilot, a cross-pilot evaluation harness,
and a live browser teleoperation service.
"""

__version__ = "0.1.0"
