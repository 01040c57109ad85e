import torch.nn as nn

from . import autodiff as ad

ACTIVATIONS = {
    "gelu": ad.gelu,
    "relu": ad.relu,
    "tanh": ad.tanh,
}


class Linear(nn.Linear):
    """Affine map evaluated as recorded matmul / add primitives"""

    def forward(self, x):
        y = ad.matmul(x, ad.transpose(self.weight, 0, 1))
        return y if self.bias is None else ad.add(y, self.bias)


class Activation(nn.Module):
    """Pointwise nonlinearity evaluated through the recorded primitives"""

    def __init__(self, kind="gelu"):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{kind}', expected one of {sorted(ACTIVATIONS)}")
        self.kind = kind

    def forward(self, x):
        return ACTIVATIONS[self.kind](x)

    def extra_repr(self):
        return self.kind


def make_mlp(in_dim, hidden, out_dim, activation="gelu"):
    """Linear -> act -> ... -> Linear, no activation after the last layer"""
    layers = []
    width = in_dim
    for h in hidden:
        layers += [Linear(width, h), Activation(activation)]
        width = h
    layers.append(Linear(width, out_dim))
    return nn.Sequential(*layers)
