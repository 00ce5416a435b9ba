"""Python bindings for the udes C++ core."""

from ._udes import *  # noqa: F401,F403
from ._udes import __version__  # noqa: F401
