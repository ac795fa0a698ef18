"""Interactive active-learning workbench for binary video-clip classifiers.

The package is organized around six parts: `corpus` (embedding ingestion and
exact cosine search), `modeling` (calibrated linear classifier plus quality
and diversity metrics), `session` (the annotation loop with four feeds),
`bandit` (next-source recommendation), `experiments` (offline replication
harness with a simulated annotator), and `service` (HTTP JSON API).
"""

__version__ = "0.1.0"
