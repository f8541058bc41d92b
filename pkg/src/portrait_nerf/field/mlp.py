"""The neural radiance field: a small ReLU/softplus MLP with hand-written backprop.

Network layout (weights are stored ``(fan_in, fan_out)`` so a batch is
pushed through as ``h @ W + b``)::

    gamma(x * input_scale) -> [trunk_0 .. trunk_{depth-1}] -> h
    h -> sigma head -> softplus                      (density, no direction)
    h -> feature -> concat(gamma(d)) -> color hidden -> rgb head -> sigmoid
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NonFinite

ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class Architecture:
    width: int = 64
    depth: int = 4
    l_pos: int = 6
    l_dir: int = 2
    activation: str = "relu"
    precision: int = 32
    input_scale: float = 5.0

    def __post_init__(self):
        if self.width < 2 or self.depth < 1:
            raise ValueError("width must be >= 2 and depth >= 1")
        if self.l_pos < 0 or self.l_dir < 0:
            raise ValueError("encoding frequency counts must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def pos_dim(self) -> int:
        return 3 * (1 + 2 * self.l_pos)

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.l_dir)

    @property
    def color_width(self) -> int:
        return max(self.width // 2, 1)

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        w = self.width
        shapes = [(f"trunk{k}", (self.pos_dim if k == 0 else w, w)) for k in range(self.depth)]
        shapes += [
            ("sigma", (w, 1)),
            ("feature", (w, w)),
            ("color", (w + self.dir_dim, self.color_width)),
            ("rgb", (self.color_width, 3)),
        ]
        return shapes

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for name, (fan_in, fan_out) in self.layer_shapes():
            out.append((f"{name}.weight", (fan_in, fan_out)))
            out.append((f"{name}.bias", (fan_out,)))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


class MlpParams:
    """Ordered weight/bias tensors of one network, plus its architecture.

    Gradients use the same type, so parameter arithmetic is written once.
    """

    def __init__(self, arch: Architecture, tensors):
        tensors = [np.asarray(t, dtype=arch.dtype) for t in tensors]
        expected = arch.tensor_shapes()
        if len(tensors) != len(expected):
            raise ValueError(f"expected {len(expected)} tensors, got {len(tensors)}")
        for t, (name, shape) in zip(tensors, expected):
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape} != {shape}")
        self.arch = arch
        self.tensors = tensors

    @classmethod
    def zeros(cls, arch: Architecture) -> "MlpParams":
        return cls(arch, [np.zeros(s, dtype=arch.dtype) for _, s in arch.tensor_shapes()])

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.arch.tensor_shapes()]

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.names.index(f"{name}.weight")
        return self.tensors[idx], self.tensors[idx + 1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.arch, [t.copy() for t in self.tensors])

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def from_flat(cls, arch: Architecture, vec: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for _, shape in arch.tensor_shapes():
            n = int(np.prod(shape))
            out.append(np.asarray(vec[pos:pos + n]).reshape(shape))
            pos += n
        if pos != len(vec):
            raise ValueError("flat vector length does not match architecture")
        return cls(arch, out)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors)

    def scaled(self, c: float) -> "MlpParams":
        c = self.arch.dtype(c)
        return MlpParams(self.arch, [c * t for t in self.tensors])

    def __add__(self, other: "MlpParams") -> "MlpParams":
        return MlpParams(self.arch, [a + b for a, b in zip(self.tensors, other.tensors)])

    def __sub__(self, other: "MlpParams") -> "MlpParams":
        return MlpParams(self.arch, [a - b for a, b in zip(self.tensors, other.tensors)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpParams):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )

    def allclose(self, other: "MlpParams", rtol=0.0, atol=1e-12) -> bool:
        return self.arch == other.arch and all(
            np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.tensors, other.tensors)
        )

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(t))) for t in self.tensors)

    def __repr__(self) -> str:
        return f"MlpParams({self.arch}, size={self.size})"


def init_params(arch: Architecture, rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in init: every entry ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    tensors = []
    for _, (fan_in, fan_out) in arch.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        tensors.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        tensors.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return MlpParams(arch, tensors)


def positional_encoding(x, L: int) -> np.ndarray:
    """``[x, sin(2^k pi x), cos(2^k pi x) for k < L]`` along the last axis.

    Feature order is ``x`` followed by, for each k, the three sines then the
    three cosines. Output length is ``3 * (1 + 2L)``.
    """
    x = np.asarray(x)
    if L < 0:
        raise ValueError("L must be >= 0")
    parts = [x]
    for k in range(L):
        arg = (2.0 ** k * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def _act(kind: str, z):
    return np.maximum(z, 0) if kind == "relu" else softplus(z)


def _act_grad(kind: str, z):
    return (z > 0).astype(z.dtype) if kind == "relu" else sigmoid(z)


class ForwardCache:
    __slots__ = ("gamma_x", "pre", "post", "sigma_pre", "u", "zc", "hc", "rgb", "sigma")


def forward(params: MlpParams, x, d, keep: bool = False):
    """Batched forward pass.

    ``x`` and ``d`` have shape ``(P, 3)``. Returns ``(rgb (P, 3), sigma (P,))``
    and, when ``keep`` is set, the activation cache needed by :func:`backward`.
    """
    arch = params.arch
    dt = arch.dtype
    x = np.asarray(x, dtype=dt).reshape(-1, 3)
    d = np.asarray(d, dtype=dt).reshape(-1, 3)
    t = params.tensors
    gamma_x = positional_encoding(x * dt(arch.input_scale), arch.l_pos)
    h = gamma_x
    pres, posts = [], []
    for k in range(arch.depth):
        z = h @ t[2 * k] + t[2 * k + 1]
        h = _act(arch.activation, z)
        pres.append(z)
        posts.append(h)
    i = 2 * arch.depth
    Ws, bs, Wf, bf, Wc, bc, Wr, br = t[i:i + 8]
    sigma_pre = (h @ Ws + bs)[:, 0]
    sigma = softplus(sigma_pre)
    feat = h @ Wf + bf
    u = np.concatenate([feat, positional_encoding(d, arch.l_dir)], axis=1)
    zc = u @ Wc + bc
    hc = _act(arch.activation, zc)
    rgb = sigmoid(hc @ Wr + br)
    if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(sigma))):
        raise NonFinite("non-finite activation in field forward pass")
    if not keep:
        return rgb, sigma
    cache = ForwardCache()
    cache.gamma_x, cache.pre, cache.post = gamma_x, pres, posts
    cache.sigma_pre, cache.u, cache.zc, cache.hc = sigma_pre, u, zc, hc
    cache.rgb, cache.sigma = rgb, sigma
    return rgb, sigma, cache


def backward(params: MlpParams, cache: ForwardCache, d_rgb, d_sigma) -> MlpParams:
    """Reverse-mode gradient of ``sum(d_rgb * rgb) + sum(d_sigma * sigma)``.

    Contributions of all points in the batch are summed.
    """
    arch = params.arch
    dt = arch.dtype
    t = params.tensors
    d_rgb = np.asarray(d_rgb, dtype=dt).reshape(-1, 3)
    d_sigma = np.asarray(d_sigma, dtype=dt).reshape(-1)
    if not (np.all(np.isfinite(d_rgb)) and np.all(np.isfinite(d_sigma))):
        raise NonFinite("non-finite upstream gradient")
    i = 2 * arch.depth
    Ws, _, Wf, _, Wc, _, Wr, _ = t[i:i + 8]
    h = cache.post[-1]
    grads = [None] * len(t)

    dzr = d_rgb * cache.rgb * (1 - cache.rgb)
    grads[i + 6] = cache.hc.T @ dzr
    grads[i + 7] = dzr.sum(axis=0)
    dzc = (dzr @ Wr.T) * _act_grad(arch.activation, cache.zc)
    grads[i + 4] = cache.u.T @ dzc
    grads[i + 5] = dzc.sum(axis=0)
    dfeat = dzc @ Wc[: arch.width].T
    grads[i + 2] = h.T @ dfeat
    grads[i + 3] = dfeat.sum(axis=0)
    dsp = (d_sigma * sigmoid(cache.sigma_pre))[:, None]
    grads[i + 0] = h.T @ dsp
    grads[i + 1] = dsp.sum(axis=0)
    dh = dfeat @ Wf.T + dsp @ Ws.T

    for k in reversed(range(arch.depth)):
        dz = dh * _act_grad(arch.activation, cache.pre[k])
        h_in = cache.gamma_x if k == 0 else cache.post[k - 1]
        grads[2 * k] = h_in.T @ dz
        grads[2 * k + 1] = dz.sum(axis=0)
        if k > 0:
            dh = dz @ t[2 * k].T

    out = MlpParams(arch, grads)
    if not out.is_finite():
        raise NonFinite("non-finite parameter gradient")
    return out


def field_eval(params: MlpParams, x_warped, d):
    """Evaluate one point (or a batch); returns ``(rgb, sigma)``."""
    x = np.asarray(x_warped)
    rgb, sigma = forward(params, x, d)
    if x.ndim == 1:
        return rgb[0], sigma[0]
    return rgb, sigma


def field_backward(params: MlpParams, x, d, d_rgb, d_sigma) -> MlpParams:
    """Parameter gradient accumulated over a batch of points."""
    _, _, cache = forward(params, x, d, keep=True)
    return backward(params, cache, d_rgb, d_sigma)


class NeuralField:
    """Adapter giving an :class:`MlpParams` the common field interface."""

    differentiable = True

    def __init__(self, params: MlpParams):
        self.params = params

    @property
    def dtype(self):
        return self.params.arch.dtype

    def query(self, x, d):
        return forward(self.params, x, d)

    def query_with_cache(self, x, d):
        return forward(self.params, x, d, keep=True)

    def backward(self, cache, d_rgb, d_sigma) -> MlpParams:
        return backward(self.params, cache, d_rgb, d_sigma)
