"""Model building blocks the exporter understands beyond plain containers."""

import torch.nn as nn


class Residual(nn.Module):
    """y = x + inner(x); exports as the inner layers plus a residual-add marker.

    The inner chain must preserve the input's shape.
    """

    def __init__(self, inner: nn.Module):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        return x + self.inner(x)
