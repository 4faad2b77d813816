"""
Command-line interface for sackit; `sac-kit <command>` dispatches to these modules.
"""

from .main import main

__all__ = [
    'main',
]
