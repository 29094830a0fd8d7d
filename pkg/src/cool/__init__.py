"""Conjoint spatio-temporal graph network for traffic forecasting.

The package is organized by pipeline stage:

- :mod:`cool.data` -- dataset formats, normalization, windowing, synthetic generator
- :mod:`cool.hetgraph` -- the heterogeneous spatio-temporal graph template
- :mod:`cool.prior` -- prior message passing over the template
- :mod:`cool.posterior` -- affinity/penalty construction and the closed-form posterior update
- :mod:`cool.decoder` -- multi-rank and multi-scale self-attention with learned fusion
- :mod:`cool.model` -- the assembled network
- :mod:`cool.training` -- training loop, checkpoints
- :mod:`cool.evaluation` -- masked metrics, historical-average baseline
- :mod:`cool.cli` -- the ``cool`` command line tool
"""

__version__ = "0.1.0"

from cool.errors import ConfigError, DataError, NumericError

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
