"""Continuous-training pipelines over timestamped sample streams.

The package is organized around the pipeline lifecycle: `storage` persists
and replays timestamped samples, `selector` builds trigger training sets,
`trainer` runs weighted SGD with optional downsampling, `drift` detects
embedding-space distribution shift, `supervisor` orchestrates triggers, and
`evaluator` scores the produced models over time windows.
"""

__version__ = "0.1.0"
