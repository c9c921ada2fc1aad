"""Emergent non-verbal communication between embodied agents.

Senders actuate a simulated joint chain to encode intents as motion; receivers
decode the motion. An energy penalty together with a Zipf intent prior induces
structure that transfers to partners never seen in training.
"""

__version__ = "0.1.0"

from .diffcore import ConfigurationError, TrainingDiverged, UsageError  # noqa: E402,F401
