from .fields import *
from .spin import *
from .records import *
from .distributions import *
from .estimator import *
