"""FLARE network: input projection, B pre-norm FLARE blocks, output projection.

Parameters live in a flat ``dict[str, Tensor]`` with dotted names, e.g.
``blocks.0.mixer.key.res.1.weight``. Linear weights are stored (in, out).
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .mixer import flare_layer_forward, kv_config
from .resmlp import ResMLPConfig, resmlp_forward, resmlp_shapes, subtree
from .tensor import Tensor, add, as_tensor, layer_norm

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    B: int = 8
    C: int = 64
    H: int = 8
    M: int = 64
    d_in: int = 2
    d_out: int = 1
    L_kv: int = 3
    L_ff: int = 3
    L_io: int = 2
    layer_norm_eps: float = 1e-5
    seed: int = 0
    # ablation switch: drop the token-mixing branch of every block
    mix: bool = True

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.H < 1 or self.C % self.H:
            raise ConfigError(f"C={self.C} must be divisible by H={self.H}")
        if min(self.d_in, self.d_out) < 1:
            raise ConfigError("d_in and d_out must be >= 1")
        if min(self.L_kv, self.L_ff, self.L_io) < 0:
            raise ConfigError("ResMLP depths must be >= 0")

    @property
    def D(self):
        return self.C // self.H

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def input_config(cfg):
    return ResMLPConfig(cfg.d_in, cfg.C, cfg.C, cfg.L_io, input_residual=False, output_residual=True)


def output_config(cfg):
    return ResMLPConfig(cfg.C, cfg.C, cfg.d_out, cfg.L_io, input_residual=True, output_residual=False)


def block_mlp_config(cfg):
    return ResMLPConfig(cfg.C, cfg.C, cfg.C, cfg.L_ff, input_residual=True, output_residual=True)


def param_shapes(cfg):
    """Ordered mapping of parameter name to shape."""
    shapes = {}

    def put(prefix, sub):
        for k, s in sub.items():
            shapes[f"{prefix}.{k}"] = s

    ln = {"gamma": (cfg.C,), "beta": (cfg.C,)}
    put("input", resmlp_shapes(input_config(cfg)))
    kv = resmlp_shapes(kv_config(cfg.C, cfg.L_kv))
    for b in range(cfg.B):
        pre = f"blocks.{b}"
        put(f"{pre}.ln1", ln)
        shapes[f"{pre}.mixer.latent"] = (cfg.M, cfg.C)
        put(f"{pre}.mixer.key", kv)
        put(f"{pre}.mixer.value", kv)
        put(f"{pre}.mixer.out", {"weight": (cfg.C, cfg.C), "bias": (cfg.C,)})
        put(f"{pre}.ln2", ln)
        put(f"{pre}.mlp", resmlp_shapes(block_mlp_config(cfg)))
    put("out_ln", ln)
    put("output", resmlp_shapes(output_config(cfg)))
    return shapes


def param_count(cfg):
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def param_breakdown(cfg):
    """Scalar counts grouped by component, for auditing :func:`param_count`."""
    groups = {}
    for name, shape in param_shapes(cfg).items():
        parts = name.split(".")
        if parts[0] == "blocks":
            key = "blocks." + (".".join(parts[2:4]) if parts[2] == "mixer" else parts[2])
        else:
            key = parts[0]
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg, seed=None, dtype=np.float32):
    """Deterministic initialization: truncated-normal weights/latents, zero biases,
    unit LayerNorm scale."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("weight", "latent"):
            data = _trunc_normal(rng, shape, INIT_STD)
        elif leaf == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def cast_params(params, dtype):
    return {k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in params.items()}


def _ln(x, params, prefix, eps):
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def input_projection(x, params, cfg):
    return resmlp_forward(x, input_config(cfg), subtree(params, "input"))


def output_projection(x, params, cfg):
    h = _ln(x, params, "out_ln", cfg.layer_norm_eps)
    return resmlp_forward(h, output_config(cfg), subtree(params, "output"))


def flare_block_forward(x, block_params, cfg):
    """x + FLARE(LN(x)), then x + ResMLP(LN(x)); ``block_params`` has keys
    ``ln1.*``, ``mixer.*``, ``ln2.*``, ``mlp.*``."""
    eps = cfg.layer_norm_eps
    if cfg.mix:
        mixed = flare_layer_forward(_ln(x, block_params, "ln1", eps),
                                    subtree(block_params, "mixer"), cfg.H, cfg.L_kv)
        x = add(x, mixed)
    h = resmlp_forward(_ln(x, block_params, "ln2", eps), block_mlp_config(cfg),
                       subtree(block_params, "mlp"))
    return add(x, h)


def model_forward(x, params, cfg, upto_block=None):
    """(..., N, d_in) -> (..., N, d_out).

    With ``upto_block=b`` the pass stops at the input of block ``b`` and returns
    the (..., N, C) hidden state there.
    """
    x = as_tensor(x)
    if x.shape[-1] != cfg.d_in:
        raise ConfigError(f"model expects d_in={cfg.d_in} features, got {x.shape[-1]}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ConfigError("model input needs at least one point")
    h = input_projection(x, params, cfg)
    for b in range(cfg.B):
        if upto_block == b:
            return h
        h = flare_block_forward(h, subtree(params, f"blocks.{b}"), cfg)
    return output_projection(h, params, cfg)
