from __future__ import annotations
import math
from typing import Optional, Sequence
import torch
import torch.nn as nn
import torch.nn.functional as F


class EqualizedWeight(nn.Module):
    """Weight stored at unit variance and scaled by c = 1/sqrt(fan_in) at use time.

    With `enabled=False` the scale is folded into the initialization instead
    (c = 1), which gives the same initial function with ordinary learning-rate
    behaviour.
    """

    def __init__(self, shape: Sequence[int], enabled: bool = True, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        fan_in = math.prod(shape[1:])
        scale = 1.0 / math.sqrt(fan_in)
        init = torch.randn(list(shape), generator=generator)
        self.enabled = enabled
        self.c = scale if enabled else 1.0
        self.weight = nn.Parameter(init if enabled else init * scale)

    def forward(self) -> torch.Tensor:
        return self.weight * self.c


class EqualizedLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: float = 0.0, equalized: bool = True,
                 generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.weight = EqualizedWeight([out_features, in_features], equalized, generator)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(), bias=self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_features: int, out_features: int, kernel_size: int, padding: int = 0,
                 equalized: bool = True, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.padding = padding
        self.weight = EqualizedWeight([out_features, in_features, kernel_size, kernel_size], equalized, generator)
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight(), bias=self.bias, padding=self.padding)


class Conv2dWeightModulate(nn.Module):
    """Per-sample style-scaled convolution, optionally demodulated to unit output variance."""

    def __init__(self, in_features: int, out_features: int, kernel_size: int, demodulate: bool = True,
                 eps: float = 1e-8, equalized: bool = True, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.out_features = out_features
        self.demodulate = demodulate
        self.padding = (kernel_size - 1) // 2
        self.weight = EqualizedWeight([out_features, in_features, kernel_size, kernel_size], equalized, generator)
        self.eps = eps

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        weights = self.weight()[None] * s[:, None, :, None, None]
        if self.demodulate:
            weights = weights * torch.rsqrt((weights ** 2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
        x = x.reshape(1, -1, h, w)
        weights = weights.reshape(b * self.out_features, *weights.shape[2:])
        x = F.conv2d(x, weights, padding=self.padding, groups=b)
        return x.reshape(b, self.out_features, h, w)


class Smooth(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        k = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])
        self.register_buffer("kernel", (k / k.sum())[None, None], persistent=False)
        self.pad = nn.ReplicationPad2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        x = self.pad(x.reshape(-1, 1, h, w))
        return F.conv2d(x, self.kernel.to(x.dtype)).reshape(b, c, h, w)


class UpSample(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.smooth = Smooth()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.smooth(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


class DownSample(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.smooth = Smooth()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.smooth(x)
        return F.interpolate(x, (x.shape[2] // 2, x.shape[3] // 2), mode="bilinear", align_corners=False)


class MiniBatchStdDev(nn.Module):
    """Appends the batch-averaged feature standard deviation as one extra channel."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        std = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
        b, _, h, w = x.shape
        return torch.cat([x, std.reshape(1, 1, 1, 1).expand(b, 1, h, w)], dim=1)
