"""
Test suite for tworeg-ridge.

Exercises the estimators, the covariance pipeline, the simulation and
stock-return studies, and the command line on seeded synthetic data.
"""

__version__ = '1.0.0'
