from .tensor import (
    Tensor,
    as_tensor,
    backward,
    default_precision,
    get_default_dtype,
    resolve_dtype,
    set_default_dtype,
)
from .ops import (
    add,
    channel_concat,
    conv3d,
    downsample_avg2x,
    elementwise_add,
    elementwise_mul,
    fully_connected,
    global_avg_pool,
    instance_norm,
    mse,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    squared_distance,
    sub,
    total,
    upsample_nearest2x,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
