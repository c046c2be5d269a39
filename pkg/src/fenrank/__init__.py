"""Cross-sectional momentum ranking with fused encoder networks.

Subpackages cover the full research pipeline: data preparation
(:mod:`fenrank.data`), the autodiff core (:mod:`fenrank.autodiff`),
model definitions (:mod:`fenrank.models`), ranking losses and metrics
(:mod:`fenrank.ranking`), training/transfer (:mod:`fenrank.training`),
the volatility-targeted backtest (:mod:`fenrank.backtest`), report
tables (:mod:`fenrank.reports`) and the command line front end
(:mod:`fenrank.cli`).
"""

__version__ = "0.1.0"
