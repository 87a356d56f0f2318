"""
LIDAR-EPW UI Package
====================

Rich console rendering for the command line tools.
"""

from .messages import MessageDisplay

__all__ = ["MessageDisplay"]
