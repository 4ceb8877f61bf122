"""Small area estimation of a composite deprivation headcount.

Unit-level logit mixed models are fitted on survey data for the indicators the
census lacks, the missing indicators are simulated for every census unit and
the headcount H is aggregated per domain. A parametric bootstrap gives MSE/CV.

This package is self-contained; `smallarea.cli` is the entry point.
"""

__version__ = "0.3.0"
