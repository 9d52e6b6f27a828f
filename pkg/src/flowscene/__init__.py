"""Conditional latent flow matching for safety-critical traffic scenarios.

The package covers the full loop: synthesize nominal and safety-critical
driving data on procedural lane graphs, train a conditional VAE over
per-actor latents, train a rectified flow that transports prior latents to
safety-critical posterior latents, generate new futures by decoding
transported latents, and score the results with traffic safety metrics.
"""

from .scene import (STATE_FIELDS, ActorState, Action, LaneGraph,
                    ManeuverLabel, Scenario, ScenarioSource, ValidationReport,
                    relative_pose, validate_scenario, wrap_angle)

__version__ = "0.1.0"

__all__ = [
    "STATE_FIELDS",
    "ActorState",
    "Action",
    "LaneGraph",
    "ManeuverLabel",
    "Scenario",
    "ScenarioSource",
    "ValidationReport",
    "relative_pose",
    "validate_scenario",
    "wrap_angle",
    "__version__",
]
