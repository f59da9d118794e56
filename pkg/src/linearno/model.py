"""Point-cloud operator models built from slice-attention blocks.

``SelfOperator`` maps (coordinates, point-wise function values) to an
output field over the same points: an MLP encoder, a stack of pre-norm
residual attention blocks, and a layer-norm + linear decoder.

``CompleterOperator`` reconstructs a field from sparse observations:
the source points (coordinates + observed values) run through the
encoder and the block stack; query coordinates are encoded with the
*same* coordinate projection and attend to the processed source
representation through a single cross-attention block before decoding.

Residual layout per block:  h <- h + Attn(LN(h));  h <- h + MLP(LN(h)).
Weights are truncated-normal(std 0.02), biases zero, layer-norm gain one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import container as C
from .attention import (
    AttentionConfig,
    ConfigError,
    _trunc_normal,
    attention_forward,
    count_flops,
    count_params,
    cross_linearno_forward,
    init_attention_params,
    AttentionParams,
)
from .tensor import Tensor, as_tensor, gelu, layer_norm


@dataclass(frozen=True)
class OperatorConfig:
    coord_dim: int
    func_dim: int          # 0 when the model consumes coordinates only
    out_dim: int
    dim: int = 64
    layers: int = 4
    slices: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    mechanism: str = "linearno"
    generalization: bool = True
    simplification: bool = True
    q_norm: str = "M"
    k_norm: str = "N"

    def __post_init__(self):
        if self.coord_dim < 1 or self.out_dim < 1 or self.func_dim < 0:
            raise ConfigError("coord_dim/out_dim must be positive, func_dim non-negative")
        if self.layers < 1:
            raise ConfigError("layers must be positive")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be positive")
        self.attention()  # validates dim/slices/heads/mechanism combination

    def attention(self):
        return AttentionConfig(self.dim, self.slices, self.heads, self.mechanism,
                               self.generalization, self.simplification,
                               self.q_norm, self.k_norm)

    def cross_attention(self):
        return AttentionConfig(self.dim, self.slices, self.heads, "cross_linearno",
                               True, True, self.q_norm, self.k_norm)


# ---- parameter construction ------------------------------------------------

def _linear(params, rng, name, n_in, n_out):
    params[name + ".w"] = Tensor(_trunc_normal(rng, (n_in, n_out)), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(n_out), requires_grad=True)


def _layernorm(params, name, d):
    params[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)


def _mlp2(params, rng, name, n_in, n_hidden, n_out):
    _linear(params, rng, name + ".fc1", n_in, n_hidden)
    _linear(params, rng, name + ".fc2", n_hidden, n_out)


def _apply_linear(params, name, x):
    return x @ params[name + ".w"] + params[name + ".b"]


def _apply_ln(params, name, x):
    return layer_norm(x, params[name + ".g"], params[name + ".b"])


def _apply_mlp2(params, name, x):
    return _apply_linear(params, name + ".fc2", gelu(_apply_linear(params, name + ".fc1", x)))


class _Block:
    def __init__(self, params, rng, prefix, config: OperatorConfig, attn_config):
        self.prefix = prefix
        self.config = config
        self.attn_config = attn_config
        d, r = config.dim, config.mlp_ratio
        _layernorm(params, prefix + ".ln1", d)
        ap = init_attention_params(attn_config, rng)
        self.attn = AttentionParams(attn_config, {})
        for k, t in ap.named():
            params[f"{prefix}.attn.{k}"] = t
            self.attn.tensors[k] = t
        _layernorm(params, prefix + ".ln2", d)
        _mlp2(params, rng, prefix + ".mlp", d, r * d, d)
        self.params = params

    def __call__(self, h, capture=False):
        att, state = attention_forward(_apply_ln(self.params, self.prefix + ".ln1", h),
                                       self.attn, self.attn_config)
        h = h + att
        h = h + _apply_mlp2(self.params, self.prefix + ".mlp",
                            _apply_ln(self.params, self.prefix + ".ln2", h))
        return (h, state) if capture else (h, None)


class _OperatorBase:
    kind = "base"

    def parameters(self):
        return self.params

    def param_count(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self):
        """Flat name -> ndarray view of all parameters (stable order)."""
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, t in self.params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ConfigError(f"parameter {name}: shape {src.shape} != {t.data.shape}")
            t.data = np.array(src, dtype=t.data.dtype)

    def save(self, path):
        sections = {"config": C.pack_json({"kind": self.kind, **asdict(self.config)})}
        for name, arr in self.state_arrays().items():
            sections["param/" + name] = arr
        C.save(path, sections)


class SelfOperator(_OperatorBase):
    kind = "self"

    def __init__(self, config: OperatorConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.dim
        params = {}
        _mlp2(params, rng, "coord_proj", config.coord_dim, d, d)
        if config.func_dim > 0:
            _mlp2(params, rng, "func_proj", config.func_dim, d, d)
        self.blocks = [_Block(params, rng, f"blocks.{i}", config, config.attention())
                       for i in range(config.layers)]
        _layernorm(params, "decoder.ln", d)
        _linear(params, rng, "decoder.head", d, config.out_dim)
        self.params = params

    def encode(self, coords, func=None):
        h = _apply_mlp2(self.params, "coord_proj", as_tensor(coords))
        if func is not None:
            if self.config.func_dim == 0:
                raise ConfigError("model was built without a function input")
            h = h + _apply_mlp2(self.params, "func_proj", as_tensor(func))
        elif self.config.func_dim > 0:
            raise ConfigError("model expects a function input")
        return h

    def decode(self, h):
        return _apply_linear(self.params, "decoder.head", _apply_ln(self.params, "decoder.ln", h))

    def forward(self, coords, func=None, capture_states=False):
        h = self.encode(coords, func)
        states = []
        for block in self.blocks:
            h, st = block(h, capture=capture_states)
            if capture_states:
                states.append(st)
        out = self.decode(h)
        return (out, states) if capture_states else out


class CompleterOperator(_OperatorBase):
    kind = "completer"

    def __init__(self, config: OperatorConfig, seed=0):
        if config.func_dim < 1:
            raise ConfigError("the completion operator needs observed values (func_dim >= 1)")
        self.config = config
        rng = np.random.default_rng(seed)
        d, r = config.dim, config.mlp_ratio
        params = {}
        _mlp2(params, rng, "coord_proj", config.coord_dim, d, d)
        _mlp2(params, rng, "func_proj", config.func_dim, d, d)
        self.blocks = [_Block(params, rng, f"blocks.{i}", config, config.attention())
                       for i in range(config.layers)]
        _layernorm(params, "cross.ln_q", d)
        _layernorm(params, "cross.ln_s", d)
        cross_cfg = config.cross_attention()
        ap = init_attention_params(cross_cfg, rng)
        self.cross_attn = AttentionParams(cross_cfg, {})
        for k, t in ap.named():
            params[f"cross.attn.{k}"] = t
            self.cross_attn.tensors[k] = t
        self.cross_cfg = cross_cfg
        _layernorm(params, "cross.ln2", d)
        _mlp2(params, rng, "cross.mlp", d, r * d, d)
        _layernorm(params, "decoder.ln", d)
        _linear(params, rng, "decoder.head", d, config.out_dim)
        self.params = params

    def forward(self, query_coords, source_coords, source_values, capture_states=False):
        query_coords = as_tensor(query_coords)
        h_s = (_apply_mlp2(self.params, "coord_proj", as_tensor(source_coords))
               + _apply_mlp2(self.params, "func_proj", as_tensor(source_values)))
        states = []
        for block in self.blocks:
            h_s, st = block(h_s, capture=capture_states)
            if capture_states:
                states.append(st)
        # Query path: shared coordinate projection, then one cross block.
        h_q = _apply_mlp2(self.params, "coord_proj", query_coords)
        att, cross_state = cross_linearno_forward(
            _apply_ln(self.params, "cross.ln_q", h_q),
            _apply_ln(self.params, "cross.ln_s", h_s),
            self.cross_attn, self.cross_cfg)
        h = h_q + att
        h = h + _apply_mlp2(self.params, "cross.mlp", _apply_ln(self.params, "cross.ln2", h))
        out = _apply_linear(self.params, "decoder.head", _apply_ln(self.params, "decoder.ln", h))
        if capture_states:
            states.append(cross_state)
            return out, states
        return out


# ---- closed-form accounting -------------------------------------------------

def _mlp2_count(n_in, n_hidden, n_out):
    return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out


def _block_count(config: OperatorConfig, attn_config):
    d, r = config.dim, config.mlp_ratio
    return 4 * d + count_params(attn_config) + _mlp2_count(d, r * d, d)


def model_param_count(config: OperatorConfig, kind="self"):
    """Closed-form total parameter count for an operator model."""
    d = config.dim
    total = _mlp2_count(config.coord_dim, d, d)
    if config.func_dim > 0 or kind == "completer":
        total += _mlp2_count(config.func_dim, d, d)
    total += config.layers * _block_count(config, config.attention())
    if kind == "completer":
        total += 4 * d  # cross-block query/source layer norms
        total += count_params(config.cross_attention())
        total += 2 * d + _mlp2_count(d, config.mlp_ratio * d, d)
    total += 2 * d + d * config.out_dim + config.out_dim
    return total


def model_flops(config: OperatorConfig, n_points, k_points=None, kind="self"):
    """Forward multiply-accumulate count for a whole model."""
    d, r, n = config.dim, config.mlp_ratio, int(n_points)
    mlp2 = lambda n_pts, n_in: n_pts * (n_in * d + d * d)
    mlp_block = lambda n_pts: n_pts * (d * r * d + r * d * d)
    if kind == "self":
        total = mlp2(n, config.coord_dim)
        if config.func_dim > 0:
            total += mlp2(n, config.func_dim)
        total += config.layers * (count_flops(config.attention(), n) + mlp_block(n))
        total += n * d * config.out_dim
        return total
    k = int(k_points)
    total = mlp2(k, config.coord_dim) + mlp2(k, config.func_dim)
    total += config.layers * (count_flops(config.attention(), k) + mlp_block(k))
    total += mlp2(n, config.coord_dim)
    total += count_flops(config.cross_attention(), n, k_points=k) + mlp_block(n)
    total += n * d * config.out_dim
    return total


# ---- persistence ------------------------------------------------------------

def save_model(model, path):
    model.save(path)


def load_model(path):
    sections = C.load(path)
    meta = C.unpack_json(sections["config"])
    kind = meta.pop("kind")
    config = OperatorConfig(**meta)
    model = SelfOperator(config, seed=0) if kind == "self" else CompleterOperator(config, seed=0)
    model.load_state_arrays({name[len("param/"):]: arr
                             for name, arr in sections.items() if name.startswith("param/")})
    return model
