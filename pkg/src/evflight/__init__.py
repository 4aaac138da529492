"""Event-camera vision-to-control stack.

Quantized spiking optical-flow estimation from event streams, planar
homography visual observables, a quadrotor dynamics simulator, an evolved
linear controller, and the closed-loop glue between them.
"""

__version__ = "0.1.0"
