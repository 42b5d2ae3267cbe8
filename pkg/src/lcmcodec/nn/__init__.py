from .functional import (
    attention_probs,
    dgcnn_positional_encoding,
    knn_feature_space,
    layer_norm_forward,
    linear_forward,
    masked_attention_forward,
    mlp_forward,
    self_attention_forward,
)
from .gradcheck import GradCheckResult, grad_check, param_grad_check
from .layers import DGCNN, MLP, AttentionLayer, Block, LayerNorm, Linear
from .weights import (
    WeightFileError,
    WeightStore,
    architecture_id,
    check_shapes,
    dumps_weights,
    load_weights,
    loads_weights,
    save_weights,
)

__all__ = [
    "AttentionLayer",
    "Block",
    "DGCNN",
    "GradCheckResult",
    "LayerNorm",
    "Linear",
    "MLP",
    "WeightFileError",
    "WeightStore",
    "architecture_id",
    "check_shapes",
    "dumps_weights",
    "loads_weights",
    "attention_probs",
    "dgcnn_positional_encoding",
    "grad_check",
    "knn_feature_space",
    "layer_norm_forward",
    "linear_forward",
    "load_weights",
    "masked_attention_forward",
    "mlp_forward",
    "param_grad_check",
    "save_weights",
    "self_attention_forward",
]
