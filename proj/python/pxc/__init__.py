from ._pxc import *  # noqa: F401,F403
from ._pxc import __doc__  # noqa: F401
