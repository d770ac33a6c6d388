"""Residual MLP: Linear_in, L residual ``h + gelu(Linear(h))`` layers, Linear_out."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import add, gelu, linear


@dataclass(frozen=True)
class ResMLPConfig:
    c_in: int
    c_hidden: int
    c_out: int
    n_layers: int = 3
    input_residual: bool = False
    output_residual: bool = False

    def __post_init__(self):
        if min(self.c_in, self.c_hidden, self.c_out) < 1:
            raise ConfigError(f"ResMLP widths must be positive: {self}")
        if self.n_layers < 0:
            raise ConfigError("ResMLP n_layers must be >= 0")
        if self.input_residual and self.c_in != self.c_hidden:
            raise ConfigError("input_residual requires c_in == c_hidden")
        if self.output_residual and self.c_hidden != self.c_out:
            raise ConfigError("output_residual requires c_hidden == c_out")


def subtree(params, prefix):
    """View of ``params`` restricted to keys under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def linear_shapes(c_in, c_out):
    return {"weight": (c_in, c_out), "bias": (c_out,)}


def resmlp_shapes(cfg):
    shapes = {}
    for k, s in linear_shapes(cfg.c_in, cfg.c_hidden).items():
        shapes[f"lin_in.{k}"] = s
    for i in range(cfg.n_layers):
        for k, s in linear_shapes(cfg.c_hidden, cfg.c_hidden).items():
            shapes[f"res.{i}.{k}"] = s
    for k, s in linear_shapes(cfg.c_hidden, cfg.c_out).items():
        shapes[f"lin_out.{k}"] = s
    return shapes


def resmlp_param_count(cfg):
    return sum(int(np.prod(s)) for s in resmlp_shapes(cfg).values())


def resmlp_forward(x, cfg, params):
    """Apply a ResMLP to ``x`` of shape (..., N, c_in)."""
    if x.shape[-1] != cfg.c_in:
        raise ConfigError(f"ResMLP expects {cfg.c_in} input features, got {x.shape[-1]}")
    h = linear(x, params["lin_in.weight"], params["lin_in.bias"])
    if cfg.input_residual:
        h = add(h, x)
    for i in range(cfg.n_layers):
        h = add(h, gelu(linear(h, params[f"res.{i}.weight"], params[f"res.{i}.bias"])))
    y = linear(h, params["lin_out.weight"], params["lin_out.bias"])
    if cfg.output_residual:
        y = add(y, h)
    return y

