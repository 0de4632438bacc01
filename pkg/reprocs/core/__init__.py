"""
Core numerics for reprocs: linear algebra, sparse recovery and the engine
"""

from .engine import ReProCS, ReProCSState, RecoveryRecord, theorem_params, train_init
from .linalg import BasisMatrix, dif, kappa_s, ric_delta
from .sparse import bpdn_solve, recover_frame, recover_frame_mc
