"""
Command line surface for reprocs
"""

from .cli import main
