"""Python access to the openseg core: configuration, matching, schedules, data and the CLI."""

import json as _json

from ._openseg import (  # noqa: F401
    assignment_cost,
    brute_force_match,
    generate_dataset,
    hungarian_match,
    lr_at_step,
    run_cli,
)
from ._openseg import profile_defaults as _profile_defaults


def profile_defaults(name: str) -> dict:
    """Resolved run configuration of a named profile ("paper" or "desk")."""
    return _json.loads(_profile_defaults(name))
