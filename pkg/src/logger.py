"""
Structured logging for the learning and certification pipeline.
Emits one JSON object per event on standard error.
"""

import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, Optional


class StructuredLogger:
    def __init__(self, name: str):
        self.logger = logging.getLogger(name)
        if not self.logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter('%(message)s'))
            self.logger.addHandler(handler)
        self.logger.setLevel(os.getenv("SUBLEVELPACK_LOG_LEVEL", "INFO").upper())
        self.logger.propagate = False

    def log_event(self, event_type: str, level: int = logging.INFO, **kwargs):
        """Log a structured event as JSON."""
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event_type": event_type,
            **kwargs
        }
        self.logger.log(level, json.dumps(log_entry, default=str))

    def log_solve(self, backend: str, status: str, iterations: int, objective: float, blocks: int, equalities: int):
        """Log the outcome of one SDP solve."""
        self.log_event(
            "sdp_solve",
            level=logging.DEBUG,
            backend=backend,
            status=status,
            iterations=iterations,
            objective=objective,
            blocks=blocks,
            equalities=equalities,
        )

    def log_certificate(self, constraint: str, gamma: Optional[float], verified: bool, solver_status: str):
        """Log a certificate verdict for one constraint."""
        self.log_event(
            "certificate",
            constraint=constraint,
            gamma=gamma,
            verified=verified,
            solver_status=solver_status,
        )

    def log_learn_complete(self, degree: int, points: int, objective: float, verified: bool):
        """Log a finished shape learn."""
        self.log_event(
            "learn_complete",
            degree=degree,
            points=points,
            objective=objective,
            verified=verified,
        )

    def log_oracle(self, constraint: str, witness: Optional[list], depth: Optional[float]):
        """Log a counterexample search result."""
        self.log_event(
            "oracle",
            constraint=constraint,
            witness=witness,
            depth=depth,
        )

    def log_warning(self, message: str, context: Optional[Dict[str, Any]] = None):
        """Log a recoverable decision or anomaly."""
        self.log_event(
            "warning",
            level=logging.WARNING,
            message=message,
            context=context or {},
        )

    def log_error(self, error: str, context: Optional[Dict[str, Any]] = None):
        """Log error."""
        self.log_event(
            "error",
            level=logging.ERROR,
            error=error,
            context=context or {},
        )


logger = StructuredLogger("sublevelpack")
