"""Meta-Stackelberg defense learning for adversarial federated learning."""

__version__ = "0.1.0"
