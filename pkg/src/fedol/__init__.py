"""Federated online sparse learning for multisource streaming GLMs.

Sources hold raw batches and renewable summaries (an accumulated Hessian and
the previous estimate); a coordinator aggregates one gradient step per source
through a proximal map that selects variables with MCP and fuses sources into
subgroups with a pairwise group MCP.
"""

from .fol import FitResult, FolConfig, fit_batch, fit_homo, fit_ind, fit_oracle, tune
from .glm import Batch, GlmFamily
from .prox import Partition, PenaltyConfig, prox_operator
from .renewable import SourceState

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "FitResult",
    "FolConfig",
    "GlmFamily",
    "Partition",
    "PenaltyConfig",
    "SourceState",
    "fit_batch",
    "fit_homo",
    "fit_ind",
    "fit_oracle",
    "prox_operator",
    "tune",
]
