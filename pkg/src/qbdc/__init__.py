"""Query-by-dropout-committee active learning for small CNNs."""
from .kernels import BACKEND
from .nn import Conv, Dense, MaxPool, Network, ReLU, Softmax, backward, forward, predict, \
    softmax_cross_entropy
from .committee import Committee, CommitteeMember, DropoutMask, dropout_sampling
from .active import ActiveConfig, run_experiment

__version__ = "0.1.0"
