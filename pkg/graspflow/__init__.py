from .error import *
from .numerics import *
from .pointcloud import *
from .grasp import *
from .flows import *
from .models import *
from .evaluator import *
from .checkpoint import *
from .introspect import *
from .lexer import *
from .parser import *
from .config import *
from .datasetgen import *
