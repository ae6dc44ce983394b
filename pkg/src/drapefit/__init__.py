"""drapefit: differentiable cloth drape simulation and material inference.

Simulates a circular cloth sample draping over a smaller circular support
under gravity (the standard textile drapability protocol), renders its
top-down silhouette differentiably, and recovers stiffness parameters,
either as point estimates or as a Gaussian posterior, by gradient descent
through the whole pipeline.
"""

__version__ = "0.1.0"
