from .errors import *
from .numerics import *
from .diffusion import *
from .propensity import *
from .conformal import *
from .datagen import *
from .checkpoint import *
from .utils.version import code_version

__version__ = code_version()
