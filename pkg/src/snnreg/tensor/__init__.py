"""Array type, reverse-mode tape and volumetric primitives."""
from .core import (
    NonFiniteError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    astype,
    clamp_min,
    concat,
    default_dtype,
    div,
    exp,
    getitem,
    log,
    make_result,
    mean,
    mul,
    neg,
    no_record,
    precision,
    relu,
    reshape,
    scale,
    set_default_dtype,
    set_finite_check,
    sigmoid,
    sqrt,
    square,
    stack,
    sub,
    tsum,
)
from .gradcheck import grad_check, numeric_grad
from .volume_ops import (
    BatchNormState,
    batchnorm3d,
    box_sum3d,
    box_sum_array,
    conv3d,
    conv3d_macs,
    conv_output_size,
    depthwise_conv3d,
    upsample_nearest2,
    window_counts,
)

__all__ = [name for name in dir() if not name.startswith("_")]
