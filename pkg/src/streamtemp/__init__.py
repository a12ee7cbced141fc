"""Daily stream temperature prediction at unmonitored sites.

LSTM ensembles trained on meteorological drivers and site attributes,
transfer-based source ranking for sites without observations, and the
evaluation/diagnostic tooling around them.
"""

__version__ = "0.1.0"

from .numerics import Rng

__all__ = ["Rng", "__version__"]
