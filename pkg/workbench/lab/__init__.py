"""
Numerical core of the workbench: synthetic data, the classifier, attacks,
repairs, detectors and the games built on them.

Nothing in this package touches the database or the run store.
"""
