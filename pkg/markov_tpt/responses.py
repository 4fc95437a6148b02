"""
JSON response helpers for CLI output and run metadata.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np


class ResultEncoder(json.JSONEncoder):
    """JSON encoder that handles numpy scalars/arrays, paths and datetimes."""

    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, (set, frozenset)):
            return sorted(obj)
        return super().default(obj)


def dumps(data: Any) -> str:
    """Serialize with the shared encoder; NaN/inf are rejected."""
    return json.dumps(data, indent=2, cls=ResultEncoder, allow_nan=False)


def make_response(data: Dict[str, Any], hint: str) -> str:
    """Create a JSON response with a human-readable hint attached."""
    data["_hint"] = hint
    return dumps(data)


def make_error(
    error_type: str,
    message: str,
    suggestion: str,
    details: Optional[Dict[str, Any]] = None,
) -> str:
    """Create a machine-readable error document."""
    error: Dict[str, Any] = {
        "_error": {"type": error_type, "message": message, "suggestion": suggestion}
    }
    if details:
        error["_error"]["details"] = details
    return dumps(error)
