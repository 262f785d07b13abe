"""Parameter bookkeeping and the small set of layers the model is built from."""

from __future__ import annotations

import hashlib
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .tensor import Tensor, get_default_dtype


class ParameterStore:
    """Named parameters plus the set of names excluded from optimisation.

    Frozen tensors are created with ``requires_grad=False`` and therefore
    never receive a gradient.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value), requires_grad=not frozen,
                   dtype=get_default_dtype(), name=name)
        self.params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def scoped(self, prefix: str) -> "ScopedStore":
        return ScopedStore(self, prefix)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self, names: Optional[list[str]] = None) -> str:
        """SHA-256 over the raw bytes of the selected (default: frozen) tensors."""
        names = sorted(self.frozen) if names is None else sorted(names)
        h = hashlib.sha256()
        for n in names:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return int(sum(t.data.size for k, t in self.params.items()
                       if k.startswith(prefix) and not (trainable_only and k in self.frozen)))


class ScopedStore:
    """View of a :class:`ParameterStore` that prefixes every name it adds."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Tensor:
        return self.store.add(f"{self.prefix}.{name}", value, frozen)

    def scoped(self, prefix: str) -> "ScopedStore":
        return ScopedStore(self.store, f"{self.prefix}.{prefix}")


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear:
    """Affine map with weight stored ``[in, out]``."""

    def __init__(self, store, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None, frozen: bool = False,
                 zero: bool = False):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        w = np.zeros((d_in, d_out)) if zero else normal(rng, (d_in, d_out), std)
        self.weight = store.add(f"{name}.weight", w, frozen)
        self.bias = store.add(f"{name}.bias", np.zeros(d_out), frozen) if bias else None

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store, name: str, dim: int, frozen: bool = False):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim), frozen)
        self.beta = store.add(f"{name}.beta", np.zeros(dim), frozen)

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class MLP:
    """Linear -> GELU -> Linear."""

    def __init__(self, store, name: str, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, std: Optional[float] = None, frozen: bool = False):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden, rng, std=std, frozen=frozen)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out, rng, std=std, frozen=frozen)

    def __call__(self, x) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Attention:
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, store, name: str, dim: int, heads: int, rng: np.random.Generator,
                 std: Optional[float] = None, frozen: bool = False, d_kv: Optional[int] = None,
                 zero_out: bool = False):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        d_kv = dim if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(store, f"{name}.q", dim, dim, rng, std=std, frozen=frozen)
        self.k = Linear(store, f"{name}.k", d_kv, dim, rng, std=std, frozen=frozen)
        self.v = Linear(store, f"{name}.v", d_kv, dim, rng, std=std, frozen=frozen)
        self.out = Linear(store, f"{name}.out", dim, dim, rng, std=std, frozen=frozen, zero=zero_out)

    def __call__(self, x, memory=None, bias=None) -> Tensor:
        memory = x if memory is None else memory
        ctx = F.scaled_dot_attention(self.q(x), self.k(memory), self.v(memory), self.heads, bias)
        return self.out(ctx)


class Block:
    """Pre-norm transformer block: ``x + attn(ln1(x))`` then ``x + mlp(ln2(x))``."""

    def __init__(self, store, name: str, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, std: Optional[float] = None, frozen: bool = False):
        self.dim = dim
        self.heads = heads
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim, frozen)
        self.attn = Attention(store, f"{name}.attn", dim, heads, rng, std=std, frozen=frozen)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim, frozen)
        self.mlp = MLP(store, f"{name}.mlp", dim, mlp_ratio * dim, dim, rng, std=std, frozen=frozen)

    def __call__(self, x) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h)
        return x + self.mlp(self.ln2(x))

    def cross(self, x, memory, bias=None) -> Tensor:
        """Same block, but queries come from ``x`` and keys/values from ``memory``."""
        if memory.shape[-1] != self.dim:
            raise ShapeError(f"memory feature size {memory.shape[-1]} != block dim {self.dim}")
        x = x + self.attn(self.ln1(x), self.ln1(memory), bias)
        return x + self.mlp(self.ln2(x))

    def weights(self) -> dict[str, Tensor]:
        return {
            "W_q": self.attn.q.weight, "W_k": self.attn.k.weight,
            "W_v": self.attn.v.weight, "W_out": self.attn.out.weight,
            "mlp.fc1": self.mlp.fc1.weight, "mlp.fc2": self.mlp.fc2.weight,
        }
