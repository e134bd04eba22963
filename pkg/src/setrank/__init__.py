"""Setwise reranking with Beta-Bernoulli posteriors and Thompson-sampled batches."""

from .bandit import (PosteriorState, PosteriorTable, final_ranking, init_priors, posterior_mean, sample_theta,
                     update_posterior)
from .judge import Batch, JudgeVerdict, SimulatedJudge, SimulatedJudgeModel, StrictOrderJudge
from .policy import (PolicyConfig, RunTrace, run_heapify, run_ts_setrank, run_ts_setrank_t, sample_uniform_batch,
                     thompson_select_batch)

__version__ = "0.1.0"
