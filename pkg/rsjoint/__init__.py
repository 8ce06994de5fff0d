"""rsjoint: joint supervised and contrastive pre-training for remote-sensing encoders."""

__version__ = "0.1.0"  # Project version for SemVer and CHANGELOG automation
