# __init__.py

from .tensor import Tensor
from .tensor import Tape
from .odeint import IntegrationSpec
from .odeint import integrate
from .cnf import CnfBlock
from .cnf import DynamicsNet
from .cnf import TraceEstimator
from .multires import NoiseSchedule
from .multires import TransformMatrix
from .multires import decompose
from .multires import compose
from .mrcnf import MrcnfModel
from .mrcnf import SampleSpec
from .mrcnf import load_checkpoint
from .mrcnf import save_checkpoint
from .dataio import DatasetSpec
from .ood import ood_report
from .ood import shuffle_study

__version__ = '0.1.0'
