"""mobreg: a two-tier distributed mobile service registry (navigator nodes,
per-group registry nodes, provider replicas) driven by a deterministic
discrete-event network simulator."""
from __future__ import annotations

from pathlib import Path

__version__ = "0.1.0"


def scenarios_dir() -> Path:
    """Directory holding the bundled scenario and taxonomy files."""
    return Path(__file__).parent / "scenarios"
