"""Reasoning-based pointwise reranking with a BM25 first stage, distillation
data tooling, IR metrics and relevance-judgment auditing."""

from .backend import (
    BackendConfig,
    Completion,
    CompletionBackend,
    FinishReason,
    GenParams,
    MockBackend,
    MockReply,
    OpenAICompletionsBackend,
    Prefix,
    Substring,
    TokenLogprob,
    aggregate_answer_logprobs,
    mock_register,
)
from .bm25 import Bm25Index, Bm25Params, build_index, retrieve, tokenize
from .core import Document, QrelEntry, Query, RunEntry, ScoredCandidate, binarize, stable_rank
from .metrics import MetricReport, evaluate, judged_at_k, mrr_at_k, ndcg_at_k, p_mrr, pairwise_accuracy
from .rerank import (
    DEFAULT_TEMPLATE,
    Mode,
    PromptTemplate,
    ReasoningJudgment,
    RerankConfig,
    assemble_prompt,
    judge,
    relevance_score,
    rerank,
    rerank_run,
)
from .trec_io import PairedInstance, PromptMap

__version__ = "0.1.0"
