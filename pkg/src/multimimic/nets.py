"""Dense networks: forward, exact reverse-mode gradients, Adam, checkpoints.

Everything is float64 numpy. A network is a list of affine layers with ELU
between them and an identity output; the policy variant adds a learned
per-dimension log standard deviation for a diagonal Gaussian action
distribution. Inference on a parameter snapshot is pure; the optimizer is
the only thing that mutates parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    output_width: int
    hidden: tuple[int, ...] = (512, 256, 128)
    activation: str = "elu"

    def __post_init__(self):
        widths = (self.input_width, self.output_width) + tuple(self.hidden)
        if any(w < 1 for w in widths):
            raise NetError(f"all widths must be >= 1, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise NetError(f"unknown activation {self.activation!r}")

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.input_width,) + tuple(self.hidden) + (self.output_width,)


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(z))


def _elu_grad(z):
    return np.where(z > 0.0, 1.0, np.exp(z))


def _identity(z):
    return z


def _identity_grad(z):
    return np.ones_like(z)


_ACTIVATIONS = {"elu": (_elu, _elu_grad), "identity": (_identity, _identity_grad)}


def orthogonal(rows: int, cols: int, rng: np.random.Generator,
               gain: float = 1.0) -> np.ndarray:
    """Orthogonal matrix via QR of a Gaussian draw, sign-fixed so the
    result is deterministic in the draw."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Mlp:
    """Affine stack with the spec's hidden activation and identity output.
    weights[i] has shape (fan_in, fan_out); forward is x @ W + b."""

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray],
                 biases: list[np.ndarray]):
        widths = spec.layer_widths
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise NetError("layer count does not match spec")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise NetError(f"layer {i} shapes {w.shape}/{b.shape} do not "
                               f"match spec widths {widths[i]}->{widths[i + 1]}")
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self._act, self._act_grad = _ACTIVATIONS[spec.activation]

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator,
             final_scale: float = 1.0) -> "Mlp":
        """Orthogonal weights (gain 1), zero biases; the last layer can be
        scaled down so a fresh policy starts near zero action."""
        widths = spec.layer_widths
        weights, biases = [], []
        for i in range(len(widths) - 1):
            gain = final_scale if i == len(widths) - 2 else 1.0
            weights.append(orthogonal(widths[i], widths[i + 1], rng, gain))
            biases.append(np.zeros(widths[i + 1]))
        return cls(spec, weights, biases)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns the output and the cache one backward pass needs:
        (input, pre-activation) per layer."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_width:
            raise NetError(f"input width {x.shape[-1]}, "
                           f"spec says {self.spec.input_width}")
        cache = []
        h = x
        last = self.num_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            cache.append((h, z))
            h = z if i == last else self._act(z)
        return h, cache

    def backward(self, cache: list, dout: np.ndarray
                 ) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients. Returns gradients in params()
        order and the gradient with respect to the input."""
        if len(cache) != self.num_layers:
            raise NetError("cache does not match network depth")
        grads: list[np.ndarray] = [None] * (2 * self.num_layers)
        dz = np.asarray(dout, dtype=np.float64)
        for i in range(self.num_layers - 1, -1, -1):
            h, z = cache[i]
            if i != self.num_layers - 1:
                dz = dz * self._act_grad(z)
            flat_h = h.reshape(-1, h.shape[-1])
            flat_dz = dz.reshape(-1, dz.shape[-1])
            grads[2 * i] = flat_h.T @ flat_dz
            grads[2 * i + 1] = flat_dz.sum(axis=0)
            dz = dz @ self.weights[i].T
        return grads, dz


class PolicyNet:
    """MLP action mean plus a state-independent learned log-std. The
    effective std is clamped to log_std_bounds; the raw parameter trains
    freely."""

    def __init__(self, mlp: Mlp, log_std: np.ndarray,
                 log_std_bounds: tuple[float, float] = (-5.0, 2.0)):
        if log_std.shape != (mlp.spec.output_width,):
            raise NetError("log_std width does not match action width")
        self.mlp = mlp
        self.log_std = log_std
        self.log_std_bounds = log_std_bounds

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator,
             init_std: float = 0.8, final_scale: float = 0.01) -> "PolicyNet":
        mlp = Mlp.init(spec, rng, final_scale=final_scale)
        log_std = np.full(spec.output_width, np.log(init_std))
        return cls(mlp, log_std)

    def params(self) -> list[np.ndarray]:
        return self.mlp.params() + [self.log_std]

    def std(self) -> np.ndarray:
        lo, hi = self.log_std_bounds
        return np.exp(np.clip(self.log_std, lo, hi))

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator
               ) -> tuple[np.ndarray, np.ndarray]:
        """Draw actions and their log probabilities."""
        mean = self.mean(obs)
        std = self.std()
        actions = mean + std * rng.standard_normal(mean.shape)
        return actions, gaussian_log_prob(mean, self.log_std_clamped(), actions)

    def log_std_clamped(self) -> np.ndarray:
        lo, hi = self.log_std_bounds
        return np.clip(self.log_std, lo, hi)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray,
                      actions: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density, summed over action dimensions."""
    z = (actions - mean) / np.exp(log_std)
    per_dim = -0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi)
    return per_dim.sum(axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the diagonal Gaussian, summed over dimensions."""
    return float(np.sum(log_std + 0.5 * (1.0 + np.log(2.0 * np.pi))))


class Adam:
    """Textbook Adam with bias correction over a list of parameter arrays.
    step() mutates the parameters in place; a single trainer owns it."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise NetError("parameter/gradient count does not match optimizer")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout, all little-endian:
#   "MMNN" | u16 version | u32 input | u32 output | u16 n_hidden
#   | u32 hidden[n_hidden] | u16 act_len | activation utf-8
#   | u8 has_log_std | raw f8 parameter blocks in params() order

_MAGIC = b"MMNN"
_VERSION = 1


def net_bytes(net: Mlp | PolicyNet) -> bytes:
    mlp = net.mlp if isinstance(net, PolicyNet) else net
    spec = mlp.spec
    act = spec.activation.encode("utf-8")
    out = [struct.pack("<4sHIIH", _MAGIC, _VERSION, spec.input_width,
                       spec.output_width, len(spec.hidden)),
           struct.pack(f"<{len(spec.hidden)}I", *spec.hidden),
           struct.pack("<H", len(act)), act,
           struct.pack("<B", int(isinstance(net, PolicyNet)))]
    for p in net.params():
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def save_net(net: Mlp | PolicyNet, path: str | Path) -> None:
    Path(path).write_bytes(net_bytes(net))


def load_net(path: str | Path) -> Mlp | PolicyNet:
    raw = Path(path).read_bytes()
    try:
        magic, version, n_in, n_out, n_hidden = struct.unpack_from("<4sHIIH", raw, 0)
        if magic != _MAGIC:
            raise NetError(f"{path}: not a network checkpoint")
        if version != _VERSION:
            raise NetError(f"{path}: unsupported checkpoint version {version}")
        off = struct.calcsize("<4sHIIH")
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
        (act_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        act = raw[off:off + act_len].decode("utf-8")
        off += act_len
        (has_log_std,) = struct.unpack_from("<B", raw, off)
        off += 1
        spec = MlpSpec(input_width=n_in, output_width=n_out,
                       hidden=tuple(hidden), activation=act)

        def take(shape):
            nonlocal off
            n = int(np.prod(shape)) * 8
            if off + n > len(raw):
                raise NetError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(shape).copy()
            off += n
            return arr

        widths = spec.layer_widths
        weights = []
        biases = []
        for i in range(len(widths) - 1):
            weights.append(take((widths[i], widths[i + 1])))
            biases.append(take((widths[i + 1],)))
        mlp = Mlp(spec, weights, biases)
        net = PolicyNet(mlp, take((n_out,))) if has_log_std else mlp
        if off != len(raw):
            raise NetError(f"{path}: trailing bytes in checkpoint")
    except struct.error as e:
        raise NetError(f"{path}: malformed checkpoint: {e}") from None
    return net
