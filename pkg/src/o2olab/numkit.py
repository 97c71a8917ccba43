"""Dense numeric core: MLPs with exact reverse-mode gradients.

Everything is float64 numpy.  Networks are described by an `MlpSpec` and
their parameters live in a single flat vector (`ParamVector`), which is
what makes parameter-space arithmetic (interpolation, plane grids,
Polyak averaging) trivial elsewhere in the package.

Three levels of differentiation are provided:

* `mlp_forward` / `mlp_forward_batch` -- plain evaluation,
* `mlp_grad` / `mlp_grad_batch` -- reverse-mode gradients of
  <upstream, output> w.r.t. parameters and inputs,
* `mlp_second_grad` -- the forward-over-reverse pass needed when a loss
  depends on an input gradient of the network (gradients of gradients).

`finite_diff_check` is the house oracle used throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

# Pre-activation clamp for the exp output transform; keeps downstream
# standard deviations inside a sane dynamic range.
EXP_CLAMP_LO = -10.0
EXP_CLAMP_HI = 5.0

_ACTIVATIONS = ("relu", "tanh")
_OUTPUT_TRANSFORMS = ("identity", "tanh_squash", "exp")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    `layer_widths` includes the input and output widths, so a spec always
    has at least two entries.  The hidden activation applies to every
    layer except the last, which uses `output_transform`.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_transform: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ShapeError(f"need at least 2 layer widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ShapeError(f"layer widths must be positive, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_transform not in _OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output_transform!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        """[(weight shape, bias shape)] per layer, in flattening order."""
        widths = self.layer_widths
        return [((widths[i + 1], widths[i]), (widths[i + 1],)) for i in range(self.n_layers)]

    @property
    def param_count(self) -> int:
        widths = self.layer_widths
        return sum(widths[i + 1] * (widths[i] + 1) for i in range(self.n_layers))


@dataclass
class ParamVector:
    """Flat float64 view of all weights and biases of one `MlpSpec`."""

    spec: MlpSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.spec.param_count:
            raise ShapeError(
                f"parameter vector has {self.values.size} entries, "
                f"spec requires {self.spec.param_count}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    chunks = []
    for (out_w, in_w), _ in spec.layer_shapes():
        bound = np.sqrt(6.0 / (in_w + out_w))
        chunks.append(rng.uniform(-bound, bound, size=out_w * in_w))
        chunks.append(np.zeros(out_w))
    return ParamVector(spec, np.concatenate(chunks))


def unflatten(params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into per-layer (weight, bias) views."""
    layers = []
    pos = 0
    for (out_w, in_w), _ in params.spec.layer_shapes():
        w = params.values[pos : pos + out_w * in_w].reshape(out_w, in_w)
        pos += out_w * in_w
        b = params.values[pos : pos + out_w]
        pos += out_w
        layers.append((w, b))
    return layers


def flatten(spec: MlpSpec, layers) -> ParamVector:
    """Inverse of `unflatten`; round trips exactly."""
    chunks = []
    for w, b in layers:
        chunks.append(np.asarray(w, dtype=np.float64).reshape(-1))
        chunks.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return ParamVector(spec, np.concatenate(chunks))


def _act(kind: str, z: np.ndarray):
    """Value, first and second derivative of an elementwise activation."""
    if kind == "relu":
        mask = (z > 0).astype(np.float64)
        return np.maximum(z, 0.0), mask, np.zeros_like(z)
    if kind in ("tanh", "tanh_squash"):
        t = np.tanh(z)
        d = 1.0 - t * t
        return t, d, -2.0 * t * d
    if kind == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    if kind == "exp":
        inside = ((z > EXP_CLAMP_LO) & (z < EXP_CLAMP_HI)).astype(np.float64)
        e = np.exp(np.clip(z, EXP_CLAMP_LO, EXP_CLAMP_HI))
        return e, e * inside, e * inside
    raise ValueError(f"unknown activation {kind!r}")


def _layer_kinds(spec: MlpSpec) -> list[str]:
    kinds = [spec.activation] * (spec.n_layers - 1)
    kinds.append(spec.output_transform)
    return kinds


def _forward_cached(params: ParamVector, x: np.ndarray):
    """Batched forward pass keeping per-layer caches for the backward passes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ShapeError(
            f"input has shape {x.shape}, expected (batch, {params.spec.in_dim})"
        )
    layers = unflatten(params)
    kinds = _layer_kinds(params.spec)
    hs = [x]
    zs = []
    dfs = []
    ddfs = []
    h = x
    for idx, ((w, b), kind) in enumerate(zip(layers, kinds)):
        z = h @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {idx}")
        f, df, ddf = _act(kind, z)
        zs.append(z)
        dfs.append(df)
        ddfs.append(ddf)
        hs.append(f)
        h = f
    return h, (layers, hs, zs, dfs, ddfs)


def mlp_forward_batch(params: ParamVector, x: np.ndarray) -> np.ndarray:
    out, _ = _forward_cached(params, x)
    return out


def mlp_forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D input, got shape {x.shape}")
    return mlp_forward_batch(params, x[None, :])[0]


def mlp_grad_batch(params: ParamVector, x: np.ndarray, upstream: np.ndarray):
    """Gradients of sum_b <upstream_b, output_b>.

    Returns (flat parameter gradient summed over the batch, per-sample
    input gradients).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    out, (layers, hs, _, dfs, _) = _forward_cached(params, x)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    grad_chunks = [None] * len(layers)
    delta = upstream * dfs[-1]
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        gw = delta.T @ hs[idx]
        gb = delta.sum(axis=0)
        grad_chunks[idx] = (gw, gb)
        delta = delta @ w
        if idx > 0:
            delta = delta * dfs[idx - 1]
    grad_input = delta
    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grad_chunks])
    return flat, grad_input


def mlp_grad(params: ParamVector, x: np.ndarray, upstream: np.ndarray):
    """Reverse-mode gradients of <upstream, output> for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 1 or upstream.ndim != 1:
        raise ShapeError("mlp_grad expects 1-D input and upstream vectors")
    flat, gin = mlp_grad_batch(params, x[None, :], upstream[None, :])
    return ParamVector(params.spec, flat), gin[0]


def mlp_jvp_batch(params: ParamVector, x: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Directional derivative of the output along an input-space direction."""
    direction = np.asarray(direction, dtype=np.float64)
    _, (layers, _, _, dfs, _) = _forward_cached(params, x)
    hd = direction
    for (w, _), df in zip(layers, dfs):
        hd = (hd @ w.T) * df
    return hd


def mlp_second_grad(
    params: ParamVector,
    x: np.ndarray,
    out_upstream: np.ndarray,
    in_direction: np.ndarray,
):
    """Parameter gradient of a bilinear form of the network Jacobian.

    For phi = sum_b <u_b, J_b v_b>, with J_b the Jacobian of the output
    w.r.t. the input at sample b, u = `out_upstream` and v =
    `in_direction`, returns (per-sample J_b v_b, flat d phi / d params).

    This is forward-over-reverse differentiation.  The forward tangent
    pass computes jvp_b = J_b v_b; the reverse pass then differentiates
    phi through both the primal activations and the tangent path, which
    is where the second derivative of the activation enters.  It is the
    workhorse behind losses that penalize input gradients of a network.
    """
    u = np.asarray(out_upstream, dtype=np.float64)
    v = np.asarray(in_direction, dtype=np.float64)
    out, (layers, hs, _, dfs, ddfs) = _forward_cached(params, x)
    if u.shape != out.shape:
        raise ShapeError(f"out_upstream shape {u.shape} != output shape {out.shape}")
    if v.shape != hs[0].shape:
        raise ShapeError(f"in_direction shape {v.shape} != input shape {hs[0].shape}")

    # Forward tangent pass, keeping zdot per layer for the reverse sweep.
    hds = [v]
    zds = []
    hd = v
    for (w, _), df in zip(layers, dfs):
        zd = hd @ w.T
        zds.append(zd)
        hd = df * zd
        hds.append(hd)

    # Reverse pass: adjoint of the tangent output w.r.t. every node.
    n = len(layers)
    grad_chunks = [None] * n
    a = u  # d phi / d hdot_L
    hbar = np.zeros_like(u)  # d phi / d h_L
    for idx in range(n - 1, -1, -1):
        w, _ = layers[idx]
        p = a * dfs[idx]
        qz = a * ddfs[idx] * zds[idx] + hbar * dfs[idx]
        gw = qz.T @ hs[idx] + p.T @ hds[idx]
        gb = qz.sum(axis=0)
        grad_chunks[idx] = (gw, gb)
        a = p @ w
        hbar = qz @ w
    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grad_chunks])
    return hds[-1], flat


def finite_diff_check(f, at: ParamVector, step: float, rng=None, max_coords: int = 128) -> float:
    """Compare a function's reported gradient against central differences.

    `f` maps a ParamVector to (scalar value, flat gradient array).  All
    coordinates are probed when there are at most `max_coords`; otherwise
    a random subset of at least 64 coordinates is sampled.  The returned
    error is max_i |g_i - fd_i| scaled by the largest gradient magnitude
    seen (floor 1), which keeps tiny-gradient coordinates from blowing up
    the ratio with finite-difference noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = f(at)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    n = at.values.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max(64, max_coords), replace=False)
    fds = np.empty(coords.size)
    for j, i in enumerate(coords):
        bumped = at.values.copy()
        bumped[i] += step
        hi, _ = f(ParamVector(at.spec, bumped))
        bumped[i] -= 2.0 * step
        lo, _ = f(ParamVector(at.spec, bumped))
        fds[j] = (hi - lo) / (2.0 * step)
    diff = np.abs(grad[coords] - fds)
    scale = max(1.0, np.abs(grad[coords]).max(initial=0.0), np.abs(fds).max(initial=0.0))
    return float(diff.max(initial=0.0) / scale)
