"""Multi-task Bayesian optimization of SVM hyperparameters across image-discretization tasks."""

__version__ = "0.1.0"
