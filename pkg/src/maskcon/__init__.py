"""Masked contrastive learning from coarse labels, with baselines and Recall@K evaluation."""

from .bank import BankSnapshot, MemoryBank
from .data import AugmentPolicy, Batch, Dataset, gen_hierarchical_gaussian
from .evaluation import RecallReport, dz_report, recall_at_k
from .losses import ObjectiveConfig, baseline_objective, ce_loss, con_loss, maskcon_objective, objective
from .model import ModelParams, init_params
from .relations import INFINITY, ZERO, RelationRows, dz, relations_mask, relations_self, relations_sup
from .training import RunConfig, sweep, train

__version__ = "0.1.0"
