"""Sine-activation MLPs with analytic input gradients.

Networks here compute h_{i+1} = sin(omega * (W_i h_i + b_i)) with the
usual frequency-aware initialization. The nonstandard part is how input
gradients are produced: instead of calling reverse-mode autodiff on the
forward pass, `value_and_grad` propagates the input jacobian forward
through each layer in closed form (J <- omega * cos(omega * pre) * W J).
That chain is itself built from differentiable torch ops, so a loss that
consumes these gradients still backpropagates correctly into the
parameters, including the second- and third-order terms that shows up
when a gradient penalty is combined with a composed field.

Value bytes are unaffected by the extra jacobian work: `forward` and the
value half of `value_and_grad` execute the same op sequence.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from . import checkpoint, precision
from .errors import ConfigError, ShapeError

HEADS = ("linear", "bounded")


class DualBatch(NamedTuple):
    """Values and input gradients for one batch of points.

    For a scalar network: values (n,), grads (n, in_dim).
    For out_dim > 1: values (n, out_dim), grads (n, out_dim, in_dim).
    """

    values: torch.Tensor
    grads: torch.Tensor


def sine_init_(linear, omega, generator, first=False):
    """Initialize one linear layer of a sine MLP in place.

    First layer weights are drawn from U[-1/in, 1/in]; deeper layers from
    U[-sqrt(6/in)/omega, sqrt(6/in)/omega] so preactivations keep unit
    variance under the sine. Biases start at zero.
    """
    with torch.no_grad():
        if first:
            bound = 1.0 / linear.in_features
        else:
            bound = math.sqrt(6.0 / linear.in_features) / omega
        linear.weight.uniform_(-bound, bound, generator=generator)
        linear.bias.zero_()


class Siren(nn.Module):
    """Sine MLP mapping (n, in_dim) points to (n,) or (n, out_dim) values.

    head="linear" ends in a plain linear layer. head="bounded" squashes
    that output through head_scale * tanh, confining the network's range
    to (-head_scale, head_scale); used for displacements that must stay
    small. The head layer is initialized with the deep-layer rule.
    """

    def __init__(self, in_dim=3, hidden_dim=256, depth=4, out_dim=1,
                 omega=30.0, head="linear", head_scale=0.05,
                 seed=None, dtype=None):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        if hidden_dim < 1 or in_dim < 1 or out_dim < 1:
            raise ConfigError("in_dim, hidden_dim, out_dim must be positive")
        if not omega > 0:
            raise ConfigError(f"omega must be positive, got {omega}")
        if head not in HEADS:
            raise ConfigError(f"unknown head {head!r}; expected one of {HEADS}")
        if head == "bounded" and not head_scale > 0:
            raise ConfigError(f"head_scale must be positive, got {head_scale}")
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.out_dim = out_dim
        self.omega = float(omega)
        self.head_kind = head
        self.head_scale = float(head_scale)
        dtype = dtype or precision.get_dtype()
        self.hidden = nn.ModuleList()
        d = in_dim
        for _ in range(depth):
            self.hidden.append(nn.Linear(d, hidden_dim, dtype=dtype))
            d = hidden_dim
        self.head = nn.Linear(d, out_dim, dtype=dtype)
        self.reset_parameters(seed)

    def reset_parameters(self, seed=None):
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
        for i, layer in enumerate(self.hidden):
            sine_init_(layer, self.omega, gen, first=(i == 0))
        sine_init_(self.head, self.omega, gen, first=False)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"expected input of shape (n, {self.in_dim}), got {tuple(x.shape)}")
        if x.dtype != self.dtype:
            raise ShapeError(
                f"input dtype {x.dtype} does not match parameters {self.dtype}; "
                "convert explicitly")

    def forward(self, x):
        self._check_input(x)
        h = x
        for layer in self.hidden:
            h = torch.sin(self.omega * nn.functional.linear(h, layer.weight, layer.bias))
        y = nn.functional.linear(h, self.head.weight, self.head.bias)
        if self.head_kind == "bounded":
            y = self.head_scale * torch.tanh(y)
        if self.out_dim == 1:
            return y.squeeze(-1)
        return y

    def value_and_grad(self, x):
        """Forward pass plus the jacobian with respect to the input.

        Returns a DualBatch. The jacobian is exact (no finite
        differences) and the returned tensors stay connected to the
        parameter graph, so losses built from either are trainable.
        """
        self._check_input(x)
        h = x
        jac = None  # (n, d, in_dim); None encodes the identity at the input
        for layer in self.hidden:
            pre = nn.functional.linear(h, layer.weight, layer.bias)
            h = torch.sin(self.omega * pre)
            scale = self.omega * torch.cos(self.omega * pre)
            if jac is None:
                jpre = layer.weight.unsqueeze(0).expand(x.shape[0], -1, -1)
            else:
                jpre = torch.matmul(layer.weight, jac)
            jac = scale.unsqueeze(-1) * jpre
        y = nn.functional.linear(h, self.head.weight, self.head.bias)
        jac = torch.matmul(self.head.weight, jac)
        if self.head_kind == "bounded":
            t = torch.tanh(y)
            jac = (self.head_scale * (1.0 - t * t)).unsqueeze(-1) * jac
            y = self.head_scale * t
        if self.out_dim == 1:
            return DualBatch(y.squeeze(-1), jac.squeeze(1))
        return DualBatch(y, jac)

    def input_gradient(self, x):
        """Gradient of a scalar network with respect to its input, (n, in_dim)."""
        if self.out_dim != 1:
            raise ShapeError(f"input_gradient needs out_dim == 1, got {self.out_dim}")
        return self.value_and_grad(x).grads

    def architecture(self):
        return {
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "depth": self.depth,
            "out_dim": self.out_dim,
            "omega": self.omega,
            "head": self.head_kind,
            "head_scale": self.head_scale,
            "dtype": "float64" if self.dtype == torch.float64 else "float32",
        }


def loss_backward(loss, module_or_params):
    """Parameter gradients of a scalar loss, without touching .grad.

    `module_or_params` is an nn.Module or an iterable of tensors. Returns
    a list of gradient tensors aligned with the parameter order; a
    parameter the loss does not reach gets a zero tensor of its shape.
    The loss may contain analytic input gradients from `value_and_grad`;
    differentiation through those higher-order terms is exact.
    """
    if loss.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if isinstance(module_or_params, nn.Module):
        params = list(module_or_params.parameters())
    else:
        params = list(module_or_params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


def save_siren(net, path):
    """Write a Siren to a checkpoint file. Output bytes depend only on
    the architecture and parameter values."""
    arrays = {name: p.detach().cpu().numpy() for name, p in net.state_dict().items()}
    checkpoint.save_arrays(path, arrays, meta={"kind": "siren", **net.architecture()})


def load_siren(path):
    """Read a Siren written by `save_siren`, restoring dtype and weights."""
    arrays, meta = checkpoint.load_arrays(path)
    if meta.get("kind") != "siren":
        raise ConfigError(f"{path} is not a sine-network checkpoint")
    dtype = torch.float64 if meta.get("dtype") == "float64" else torch.float32
    # seed=0 keeps construction off the global RNG; weights are replaced below
    net = Siren(
        in_dim=int(meta["in_dim"]), hidden_dim=int(meta["hidden_dim"]),
        depth=int(meta["depth"]), out_dim=int(meta["out_dim"]),
        omega=float(meta["omega"]), head=meta["head"],
        head_scale=float(meta["head_scale"]), seed=0, dtype=dtype,
    )
    state = {k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()}
    net.load_state_dict(state)
    return net
