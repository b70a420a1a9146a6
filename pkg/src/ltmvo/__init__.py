"""Self-supervised monocular visual odometry with long-term recurrent pose modeling."""

__version__ = "0.1.0"
