"""Layer-wise optimal-control optimizer for feed-forward networks and neural ODEs."""
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .config import TrainConfig
from .core import (BackwardState, FeedbackPolicy, Optimizer, StepResult, backward_pass,
                   forward_update, make_optimizer, scalar_gn_backward)
from .curvature import AdaptiveCurvature, IdentityCurvature, KfacCurvature, make_curvature
from .data import Dataset, load_csv, make_synthetic
from .errors import (ConfigError, ConvergenceError, CurvatureError, DivergedError,
                     FactorizationError, IndefiniteError, NotPSDError, OcnoptError, ParseError)
from .game import AlignmentBandit, AlignmentPolicy, PlayerSplit, cooperative_step, split_players
from .linalg import kron_apply, pinv_psd, sym_eig
from .netgraph import (Activation, Dense, MultiPath, NetworkSpec, ResidualArch, ResidualStage,
                       accuracy, forward, predict)
from .node import OdeField, OdeModel, horizon_step, node_step, ode_backward, ode_forward
from .train import TrainRun, train

__version__ = "0.1.0"
