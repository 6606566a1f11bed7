from occ4d._core import *  # noqa: F401,F403
from occ4d._core import __version__  # noqa: F401
