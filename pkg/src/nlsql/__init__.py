"""Schema-aware NL2SQL pipeline with a local-first model cascade.

A question flows through schema extraction, decomposition, SQL generation
and four-stage validation. A cheap local model answers first; an expensive
remote model is consulted only when the local candidate fails validation,
bounded at three corrective attempts. The bench module scores execution
accuracy, runtime efficiency and cost per query over task files.
"""

__version__ = "0.1.0"

from .state import (  # noqa: F401
    DatabaseRegistry,
    Outcome,
    PipelineResult,
    PipelineState,
    Question,
    Route,
    Stage,
)
