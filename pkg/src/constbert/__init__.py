"""Constant-space multi-vector retrieval: learned pooling, fixed-size records, MaxSim search."""

from ._kernels import backend as kernel_backend
from .index import Index, build_index, open_index, record_size
from .pooling import (
    ProjectionWeights,
    TrainConfig,
    grad_score_wrt_w,
    init_weights,
    load_weights,
    pad_or_truncate,
    pool,
    save_weights,
    score_pooled,
    train_pool,
)
from .retrieval import CandidateList, ScoredDoc, first_stage_overlap, rerank, search_exact
from .scoring import argmax_assignments, batch_maxsim, maxsim

__version__ = "0.1.0"
