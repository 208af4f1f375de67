"""Neural implicit surfaces from imaging sonar with joint pose refinement.

A desk-scale toolkit: sonar simulator, odometry drift injector, differentiable
acoustic renderer over an SDF + radiance field, joint field/pose trainer, and
mesh extraction / evaluation.
"""

__version__ = "0.1.0"
