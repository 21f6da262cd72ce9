"""flowcritic: offline actor-critic learning with flow-based behavior
density penalties, plus the generative-model zoo, tabular verification
suite, and synthetic benchmarks used to study it."""

__version__ = "0.1.0"
