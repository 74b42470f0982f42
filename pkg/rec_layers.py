"""
Shared transformer building blocks

A Module owns an ordered registry of named parameters ("layers.3.attn.wq")
so that freezing, optimisation and checkpointing all work by name. The
pre-norm block below is used by both the text encoder and the ID-based
sequence backbones.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

import rec_tensor as T
from rec_tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02

BLOCK_PARAM_SUFFIXES = (
    "ln1.gamma", "ln1.beta",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk",
    "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)


class Module:
    """Named parameter registry with trainability flags."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"Duplicate parameter name: {name}")
        p = Tensor(np.array(value, dtype=np.float32, copy=True), requires_grad=True, name=name)
        self.params[name] = p
        return p

    def parameters(self, trainable_only: bool = False) -> Dict[str, Tensor]:
        if trainable_only:
            return {n: p for n, p in self.params.items() if p.requires_grad}
        return dict(self.params)

    def set_trainable(self, names: Iterable[str]):
        """Mark exactly `names` trainable and freeze everything else."""
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"Unknown parameters: {sorted(unknown)}")
        for n, p in self.params.items():
            p.requires_grad = n in names

    def trainable_names(self) -> List[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def parameter_count(self, names: Optional[Iterable[str]] = None) -> int:
        names = self.params.keys() if names is None else names
        return int(sum(self.params[n].data.size for n in names))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"State is missing parameters: {sorted(missing)}")
        for n, p in self.params.items():
            value = np.asarray(state[n], dtype=np.float32)
            if value.shape != p.shape:
                raise T.ShapeError(f"Parameter {n}: expected {p.shape}, got {value.shape}")
            p.data[...] = value


def init_block(module: Module, prefix: str, d: int, ffn_dim: int, rng: np.random.Generator):
    """Register the parameters of one pre-norm transformer block."""
    module.add_param(f"{prefix}.ln1.gamma", np.ones(d))
    module.add_param(f"{prefix}.ln1.beta", np.zeros(d))
    for w in ("q", "k", "v", "o"):
        module.add_param(f"{prefix}.attn.w{w}", rng.normal(0.0, INIT_STD, (d, d)))
        module.add_param(f"{prefix}.attn.b{w}", np.zeros(d))
    module.add_param(f"{prefix}.ln2.gamma", np.ones(d))
    module.add_param(f"{prefix}.ln2.beta", np.zeros(d))
    module.add_param(f"{prefix}.ffn.w1", rng.normal(0.0, INIT_STD, (d, ffn_dim)))
    module.add_param(f"{prefix}.ffn.b1", np.zeros(ffn_dim))
    module.add_param(f"{prefix}.ffn.w2", rng.normal(0.0, INIT_STD, (ffn_dim, d)))
    module.add_param(f"{prefix}.ffn.b2", np.zeros(d))


def block_param_count(d: int, ffn_dim: int) -> int:
    """Closed-form parameter count of one block."""
    return 4 * (d * d + d) + 2 * (2 * d) + (d * ffn_dim + ffn_dim) + (ffn_dim * d + d)


def attention_mask(key_mask: np.ndarray, causal: bool) -> np.ndarray:
    """Boolean mask (B, 1, T, T): True where query t may attend to key s."""
    key_mask = np.asarray(key_mask, dtype=bool)
    b, t = key_mask.shape
    mask = np.broadcast_to(key_mask[:, None, None, :], (b, 1, t, t))
    if causal:
        mask = mask & np.tril(np.ones((t, t), dtype=bool))[None, None]
    return np.ascontiguousarray(mask)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def block_forward(module: Module, prefix: str, x: Tensor, heads: int, mask: np.ndarray,
                  activation: Callable[[Tensor], Tensor] = T.gelu,
                  dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
                  training: bool = False, capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """
    Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x)).

    Args:
        x: (B, T, d) hidden states
        mask: boolean attention mask broadcastable to (B, H, T, T)
        capture: if given, the post-softmax attention (B, H, T, T) is appended
    """
    p = module.params
    b, t, d = x.shape
    dh = d // heads

    def split_heads(h: Tensor) -> Tensor:
        return T.transpose(T.reshape(h, (b, t, heads, dh)), 1, 2)

    h = T.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    q = split_heads(linear(h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"]))
    k = split_heads(linear(h, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"]))
    v = split_heads(linear(h, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"]))

    scores = T.scale(T.matmul(q, T.transpose(k, -2, -1)), 1.0 / float(np.sqrt(dh)))
    att = T.softmax(scores, axis=-1, mask=mask)
    if capture is not None:
        capture.append(att.data.copy())
    att = T.dropout(att, dropout, rng, training)

    ctx = T.reshape(T.transpose(T.matmul(att, v), 1, 2), (b, t, d))
    out = linear(ctx, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    x = T.add(x, T.dropout(out, dropout, rng, training))

    h = T.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    f = activation(linear(h, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"]))
    f = linear(f, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])
    return T.add(x, T.dropout(f, dropout, rng, training))
