"""Multi-level two-stage knowledge distillation for small transformer encoders."""
from .distill import (
    DistillConfig,
    LayerMap,
    LossReport,
    Projections,
    SplitSpec,
    loss_emb,
    loss_ffn,
    loss_kd,
    loss_mha,
    loss_sc,
    loss_ss,
    mha_split,
    relation_matrix,
    stage1_loss,
    stage2_loss,
    uniform_layer_map,
)
from .model import Batch, EncoderOutputs, Model, ModelConfig, count_params, encoder_forward
from .tasks import SyntheticTaskSpec, generate_task
from .training import RunRecord, TrainConfig, distill, distill_one_stage, evaluate, train_teacher

__version__ = "0.1.0"
