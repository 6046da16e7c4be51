from .gradcheck import grad_check
from .ops import (
    ShapeError,
    abs_,
    add,
    avgpool3d,
    broadcast_mul_channels,
    clamp_min,
    concat,
    concat_channels,
    conv3d,
    dense,
    div,
    flatten,
    global_avg_pool,
    global_max_pool,
    log,
    max_axis,
    maxpool3d,
    mean_all,
    mean_axis,
    mul,
    relu,
    reshape,
    scale,
    select,
    sigmoid,
    softmax,
    square,
    sub,
    sum_all,
    upsample3d_nearest,
)
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)
