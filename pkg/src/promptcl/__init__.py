"""Prompt-tuned continual learning on a frozen next-item transformer."""

from .backbone import Backbone, BackboneConfig
from .config import RunConfig, load_config
from .continual import (POLICIES, ContinualState, FreezePolicy, TaskRecord,
                        coldstart_runs, evaluate_task, export_user_representations,
                        forgetting_audit, make_context, pretrain_state,
                        run_ablation, run_sequence, run_task)
from .data import (BehaviorSequence, Dataset, SynthTask, SyntheticSpec, TaskSpec,
                   load_dataset, mask_cold_start, standard_suite, synth_generate,
                   write_dataset)
from .metrics import RankingProtocol, accuracy, hit_ratio_at_k
from .optim import Adam, ParameterGroup
from .prompts import (ContextualAttention, PromptBankEntry, contextual_prompts,
                      embed_task_descriptions, feature_sequence_fusion,
                      fuse_contextual, fuse_position_prompts, init_prompt_for_task)
from .rng import Rng
from .tensor import Tensor

__version__ = "0.1.0"
