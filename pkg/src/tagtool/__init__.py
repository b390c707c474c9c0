"""Volumetric left-ventricle wall motion: synthetic tagged-MR cohorts and
sequential dense 3D motion recovery.

Subpackage map:

- ``geometry``: parametric wall model (layered half-ellipsoids with twist
  and centroid offsets) and material lattices.
- ``simulate``: cohort synthesis, plane clipping into tracked datapoints,
  two-layer shape fitting, quality checks.
- ``autodiff``: float64 tape-based reverse-mode differentiation.
- ``flow``: fixed-step point flow integration and displacement penalties.
- ``network``: the transition network (cross/self point attention, global
  per-ring deformation head, velocity-field local step).
- ``training``: two-stage optimization with staged parameter unlocks.
- ``recover``: normalization, sequential whole-cycle recovery, the
  direct-fit baseline, metrics, ablation harness.
- ``intersect``: triangle and mesh self-intersection tests.
- ``formats``: bit-exact sequence/datapoint/checkpoint files.
- ``config`` / ``pipeline`` / ``cli``: run configuration and orchestration.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, TagtoolError

__all__ = ["ConfigError", "DataError", "NumericalError", "TagtoolError",
           "__version__"]
