"""Federated prototype networks with adapters.

Thin bindings over the C++ library: kernels on float64 numpy arrays, the
payload protocol, synthetic data, interpretation helpers and the commands
behind the ``protofed`` CLI.
"""

from ._protofed import (
    ConfigError,
    DataError,
    Error,
    FormatError,
    NumericError,
    ProtocolError,
    activation_bbox,
    aggregation_weights,
    conv2d,
    deserialize_payload,
    generate_site,
    gradcheck,
    iou,
    linear,
    load_checkpoint,
    maxpool2d,
    partition,
    relu,
    report,
    resolve_config,
    serialize_payload,
    set_quiet,
    sliding_sq_l2,
    train,
    upsample_bilinear,
)

__all__ = [name for name in dir() if not name.startswith("_")]
