"""Parameter counts, FLOPs and memory footprints of LLaMA-style decoder models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Tuple


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_attention_heads: int
    num_kv_heads: int
    vocab_size: int
    max_position_embeddings: int = 8192
    param_bytes: int = 2
    grad_bytes: int = 2
    # total across all optimizer state tensors (fp32 m, v and master weights)
    optimizer_bytes_per_param: int = 12
    # False for critic/reward models, which end in a hidden -> 1 projection
    has_output_head: bool = True

    def __post_init__(self):
        counts = ("hidden_size", "intermediate_size", "num_layers", "num_attention_heads",
                  "num_kv_heads", "vocab_size", "max_position_embeddings", "param_bytes", "grad_bytes")
        for name in counts:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ModelSpecError(f"{name} must be a positive integer, got {value!r}")
        if self.optimizer_bytes_per_param < 0:
            raise ModelSpecError("optimizer_bytes_per_param must be >= 0")
        if self.hidden_size % self.num_attention_heads:
            raise ModelSpecError("hidden_size must be divisible by num_attention_heads")
        if self.num_attention_heads % self.num_kv_heads:
            raise ModelSpecError("num_attention_heads must be divisible by num_kv_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.num_kv_heads

    @property
    def output_dim(self) -> int:
        return self.vocab_size if self.has_output_head else 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelSpecError(f"unknown model fields: {sorted(unknown)}")
        return cls(**data)


# LLaMA-3 family shapes used throughout the experiments.
LLAMA3_PRESETS: Dict[str, Dict[str, int]] = {
    "llama3-7b": dict(hidden_size=4096, intermediate_size=14336, num_layers=32,
                      num_attention_heads=32, num_kv_heads=8, vocab_size=128256),
    "llama3-13b": dict(hidden_size=5120, intermediate_size=13824, num_layers=40,
                       num_attention_heads=40, num_kv_heads=40, vocab_size=128256),
    "llama3-34b": dict(hidden_size=8192, intermediate_size=22016, num_layers=48,
                       num_attention_heads=64, num_kv_heads=8, vocab_size=128256),
    "llama3-70b": dict(hidden_size=8192, intermediate_size=28672, num_layers=80,
                       num_attention_heads=64, num_kv_heads=8, vocab_size=128256),
}


def preset(name: str, **overrides: Any) -> ModelSpec:
    try:
        base = dict(LLAMA3_PRESETS[name])
    except KeyError:
        raise ModelSpecError(f"unknown model preset {name!r}; known: {sorted(LLAMA3_PRESETS)}") from None
    base.update(overrides)
    return ModelSpec(**base)


def layer_param_count(spec: ModelSpec) -> int:
    """Parameters of one decoder layer: attention, gated MLP and two norms."""
    h = spec.hidden_size
    attn = 2 * h * h + 2 * h * spec.kv_dim
    mlp = 3 * h * spec.intermediate_size
    return attn + mlp + 2 * h


def param_count(spec: ModelSpec, include_output_embedding: bool = True) -> int:
    """Total parameters, optionally including the vocab-sized output embedding.

    The output embedding is always counted as ``vocab_size * hidden_size`` so the
    result lines up with the commonly quoted model sizes; use :func:`model_param_count`
    for the parameters a model actually holds (scalar heads included).
    """
    total = spec.num_layers * layer_param_count(spec)
    total += spec.vocab_size * spec.hidden_size  # input embedding
    total += spec.hidden_size  # final norm
    if include_output_embedding:
        total += spec.vocab_size * spec.hidden_size
    return total


def model_param_count(spec: ModelSpec) -> int:
    """Parameters resident for a model: vocab head or scalar value head."""
    return param_count(spec, include_output_embedding=False) + spec.hidden_size * spec.output_dim


def layer_unit_params(spec: ModelSpec) -> list:
    """Per-layer parameter counts with the embedding folded into layer 0 and the
    final norm plus output head folded into the last layer. Sums to
    :func:`model_param_count`."""
    per_layer = layer_param_count(spec)
    units = [per_layer] * spec.num_layers
    units[0] += spec.vocab_size * spec.hidden_size
    units[-1] += spec.hidden_size + spec.hidden_size * spec.output_dim
    return units


def layer_forward_macs(spec: ModelSpec, context_len: int) -> int:
    """Multiply-accumulates per token for one decoder layer.

    Projections (q, k, v, o), the gated MLP and the two attention matmuls
    (scores against ``context_len`` keys, then the weighted sum of values).
    """
    h = spec.hidden_size
    proj = 2 * h * h + 2 * h * spec.kv_dim
    mlp = 3 * h * spec.intermediate_size
    attn = 2 * spec.num_attention_heads * spec.head_dim * context_len
    return proj + mlp + attn


def head_forward_macs(spec: ModelSpec) -> int:
    return spec.hidden_size * spec.output_dim


def flops(spec: ModelSpec, phase: str, tokens: int, context_len: int) -> int:
    """Dense-matmul FLOPs for ``tokens`` tokens through the whole model.

    forward = 2 * tokens * (num_layers * layer MACs + head MACs); backward is
    twice the forward. Softmax, norms and the embedding lookup are ignored.
    """
    if tokens < 0 or context_len < 0:
        raise ValueError("tokens and context_len must be non-negative")
    macs = spec.num_layers * layer_forward_macs(spec, context_len) + head_forward_macs(spec)
    fwd = 2 * tokens * macs
    if phase == "forward":
        return fwd
    if phase == "backward":
        return 2 * fwd
    raise ValueError(f"phase must be 'forward' or 'backward', got {phase!r}")


def kv_cache_bytes(spec: ModelSpec, batch: int, seq_len: int) -> int:
    if batch < 0 or seq_len < 0:
        raise ValueError("batch and seq_len must be non-negative")
    return 2 * spec.num_layers * spec.num_kv_heads * spec.head_dim * batch * seq_len * spec.param_bytes


def logits_bytes(vocab: int, batch: int, ctx_len: int, elem_bytes: int) -> int:
    if min(vocab, batch, ctx_len, elem_bytes) < 0:
        raise ValueError("all arguments must be non-negative")
    return vocab * batch * ctx_len * elem_bytes


def static_param_bytes(spec: ModelSpec) -> Tuple[int, int, int]:
    """(parameter, gradient, optimizer-state) bytes for the full model."""
    n = model_param_count(spec)
    return n * spec.param_bytes, n * spec.grad_bytes, n * spec.optimizer_bytes_per_param
