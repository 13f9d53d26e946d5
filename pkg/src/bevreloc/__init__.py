"""BEV-to-navigation-map neural re-localization toolkit."""

__version__ = "0.1.0"

from .se2 import BEV_SPEC, MAP_SPEC, GridSpec, Pose, PoseOffset  # noqa: F401
