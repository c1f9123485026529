"""Tightly coupled GNSS + visual-inertial estimation testbed.

Library layout:
  srif          square-root information filter primitives
  state         navigation state container and manifold retraction
  imu           propagation, preintegration, measurement-time bridging
  vision        anchored inverse-depth features, sliding-window updates
  gnss          raw-measurement residual models and covariance composition
  geodesy       WGS-84 conversions and local-frame rotations
  initializers  global-frame alignment and receiver clock bootstrapping
  sim           deterministic scenario generator and file format
  estimator     the full fusion loop
  report, cli   evaluation outputs and command-line harness
"""

__version__ = "0.1.0"
