"""Spatial attention gates built from 2-plane 7x7 convolutions.

Both gates own a single bias-free (1, 2, 7, 7) kernel, i.e. 98 weights.
"""

from dataclasses import dataclass

from .autodiff import Tensor, mul
from .errors import ShapeError
from .ops import ConvParams, channel_max, channel_mean, concat_channels, conv2d, expand_channels, sigmoid


@dataclass
class SpatialAttentionParams:
    conv7: ConvParams

    @classmethod
    def from_weight(cls, weight: Tensor) -> "SpatialAttentionParams":
        if weight.shape != (1, 2, 7, 7):
            raise ShapeError(f"attention kernel must be (1, 2, 7, 7), got {weight.shape}")
        return cls(ConvParams(weight, None, padding=3))

    @property
    def n_params(self) -> int:
        return self.conv7.n_params


def _gate(features, planes, p):
    m = sigmoid(conv2d(planes, p.conv7))
    return mul(features, expand_channels(m, features.shape[1]))


def sa_bottleneck(F, p):
    """Self-attention gate: map from the channel mean and max of ``F`` itself."""
    planes = concat_channels(channel_mean(F), channel_max(F))
    return _gate(F, planes, p)


def csa(F_e, F_d, p):
    """Cross-scale gate on encoder features ``F_e`` steered by decoder features ``F_d``.

    The attention map is computed from the channel means of both tensors, so
    ``F_d`` may have any channel count but must match ``F_e`` spatially.
    """
    if F_e.shape[0] != F_d.shape[0] or F_e.shape[2:] != F_d.shape[2:]:
        raise ShapeError(
            f"csa: encoder {F_e.shape} and decoder {F_d.shape} features differ spatially; "
            "upsample the decoder tensor first"
        )
    planes = concat_channels(channel_mean(F_e), channel_mean(F_d))
    return _gate(F_e, planes, p)
