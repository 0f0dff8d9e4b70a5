"""Task-vector and LoRA merging for cross-lingual ASR transfer."""

from asrmerge.checkpoint_io import Tensor, TensorMap, read_checkpoint, write_checkpoint
from asrmerge.lambda_opt import OptimizerConfig, TrialLog, optimize
from asrmerge.metrics import cosine_similarity, pearson, spearman, wer
from asrmerge.taskvec import (
    LoraAdapter,
    LoraLayer,
    MergeMode,
    MergeSpec,
    NamePolicy,
    TaskVector,
    apply_task_vector,
    combine_task_vectors,
    compute_task_vector,
    materialize_lora,
    merge_lora,
)

__version__ = "0.1.0"
