"""ADMM-Softmax: multinomial logistic regression trained by an ADMM splitting,
with Newton-CG, L-BFGS and SGD baselines and an MNIST experiment harness."""

__version__ = "0.1.0"

from .admm import AdmmConfig, AdmmState, WSystemFactor, precompute_w_system, run_admm, w_update, z_update
from .baselines import OptimizerConfig, lbfgs, newton_cg, run_baseline, sgd_nesterov
from .data import RawImageSet, SplitSpec, load_csv, one_hot, parse_idx, split, write_csv
from .errors import *  # noqa: F401,F403
from .features import ElmEmbedding, elm_apply, elm_build, load_precomputed_features, read_weights, write_features, write_weights
from .history import ProgressRecord, TrainHistory
from .linalg import LaplacianOperator, SpdFactor, build_laplacian, pcg_solve, spd_factorize, spd_solve
from .model import Dataset, RegularizerSpec, accuracy, mlr_objective, predict, zsub_objective
