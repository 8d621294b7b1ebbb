"""Cache-assisted speculative decoding on simulated language models.

A small draft model continuously grows a tree of candidate
continuations inside a shared cache while the large target model
verifies the best cached path in chains, committing several tokens per
target forward.  Corrections steer the tree after each verification, so
the draft never idles waiting for the target and the output stream
stays exactly the target's own.
"""

from .backend import active_backend_name, compiled_available, set_backend
from .cache import CacheConfig, QueryResult, TreeCache
from .engine import (
    EngineConfig,
    RunResult,
    StepTrace,
    communication_ratio,
    run_speculative,
    run_vanilla,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    FrontierFull,
    InputError,
    MaskError,
    ProtocolError,
    SpecacheError,
)
from .lm import (
    KGramModel,
    ModelSpec,
    ScriptedModel,
    ToyModel,
    Vocabulary,
    load_models_file,
    make_kgram_model,
    make_uniform_model,
)
from .mask import AttentionMask, MaskBuilder, build_mask, full_visibility
from .metrics import RunMetrics, aggregate, finalize
from .verify import VerifyOutcome, verify_greedy, verify_sampling

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "CacheConfig",
    "ConfigError",
    "CorpusFormatError",
    "EngineConfig",
    "FrontierFull",
    "InputError",
    "KGramModel",
    "MaskBuilder",
    "MaskError",
    "ModelSpec",
    "ProtocolError",
    "QueryResult",
    "RunMetrics",
    "RunResult",
    "ScriptedModel",
    "SpecacheError",
    "StepTrace",
    "ToyModel",
    "TreeCache",
    "VerifyOutcome",
    "Vocabulary",
    "active_backend_name",
    "aggregate",
    "build_mask",
    "communication_ratio",
    "compiled_available",
    "finalize",
    "full_visibility",
    "load_models_file",
    "make_kgram_model",
    "make_uniform_model",
    "run_speculative",
    "run_vanilla",
    "set_backend",
    "verify_greedy",
    "verify_sampling",
]
