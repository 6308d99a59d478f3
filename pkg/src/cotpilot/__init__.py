"""
cotpilot: an inference-time controller that steers a reasoning model's
chain of thought through thinking modes (NORMAL, FAST, SLOW, SKIP) using a
lightweight GRU difficulty estimator over per-token uncertainty metrics
and step-text embeddings, plus analytics over the resulting traces.
"""

from .analyzer import (AttributionReport, CueConfig, MarkedTrace, mark_steps,
                       outcome_conditioned_savings, pearson, replay_states,
                       state_allocation, length_limit_failures,
                       token_savings_attribution)
from .backends import (GenerationBackend, OpenAICompatBackend, ScriptEntry,
                       ScriptedBackend)
from .config import (ControlTag, FsmConfig, InvalidConfig, SamplingConfig,
                     ThinkingState, parse_tag, render_tag, validate_config,
                     validate_sampling_config)
from .embeddings import (EmbeddingProvider, HashedProjectionProvider,
                         HttpEmbeddingProvider)
from .features import (StepFeatureVector, TokenFeatureTracker,
                       UncertaintyFeatures, fuse, pool_step, token_features)
from .fsm import (ControllerState, DifficultyHistory, reset, tag_for_state,
                  transition)
from .orchestrator import (MATH_SYSTEM_PROMPT, BackendFailure,
                           assemble_context, extract_answer, run_session)
from .pilot import (ConstantDifficultyPilot, PilotModel, PilotSession,
                    ScriptedDifficultyPilot, TrainConfig, TrainSample,
                    bce_loss, difficulty, load, load_checkpoint,
                    make_synth_dataset, save, save_checkpoint, synth_teacher,
                    train)
from .segmenter import StepEvent, StepEventKind, StepSegmenter, TokenMeta
from .trace import (StepRecord, TraceDocument, append_trace, read_traces,
                    write_traces)

__version__ = "0.1.0"
