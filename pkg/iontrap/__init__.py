# flake8: noqa

__version__ = '1.0.0'

from .constants import *
from .errors import *
from .physics import *
from .dynamics import *
from .imaging import *
from .fitting import *
from .config import *
from .util import *
