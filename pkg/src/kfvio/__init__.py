"""Keyframe-based sliding-window visual-inertial filter with full camera-IMU
self-calibration, a deterministic sensor simulator, and a Lie-derivative
observability analyzer."""

import threadpoolctl as _threadpoolctl

# The filter issues many small dense-algebra calls; multi-threaded BLAS
# spin-waits dominate the runtime on small machines.
_threadpoolctl.threadpool_limits(limits=1, user_api="blas")

__version__ = "0.1.0"
