"""Version information for retcomplete."""

__version__ = "0.1.0"
__author__ = "retcomplete developers"
__description__ = "Two-stage pluralistic image completion with a bidirectional retentive network"
