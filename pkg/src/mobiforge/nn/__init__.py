from .tensor import (  # noqa: F401
    Adam,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    dilated_causal_conv1d,
    embedding_lookup,
    gelu,
    kl_div,
    layer_norm,
    log_softmax,
    matmul,
    mse,
    mul,
    multi_head_attention,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    tensor_slice,
    transpose,
    use_float64,
    xavier_init,
)
from .checkpoint import load_checkpoint, load_into, save_checkpoint  # noqa: F401
from .gradcheck import check_gradient, finite_difference_grad  # noqa: F401
