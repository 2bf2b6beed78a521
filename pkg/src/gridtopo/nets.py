"""Minimal feedforward networks with analytic reverse-mode gradients.

The only architecture needed is a projection layer into 256 units, three
ReLU hidden layers of 256 units, and a linear output head, so gradients are
implemented layer by layer instead of through a general tape.  Everything is
float64: gradient checks against central differences are part of the test
contract and benefit from the extra precision.

Policy heads return raw logits; masking adds ``MASK_OFFSET`` to illegal
entries before the softmax, which drives their probability below 1e-6 while
keeping all intermediate values finite.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MASK_OFFSET = -1e9
CHECKPOINT_VERSION = 1


class Dense:
    """Affine layer ``y = x W + b``."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b

    @staticmethod
    def orthogonal(rng, n_in: int, n_out: int, gain: float) -> "Dense":
        a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))  # deterministic orientation
        w = q[:n_in, :n_out] if n_in >= n_out else q[:n_out, :n_in].T
        return Dense(np.ascontiguousarray(gain * w), np.zeros(n_out))

    def forward(self, x):
        return x @ self.w + self.b

    def backward(self, x, grad_out):
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
        grad_x = grad_out @ self.w.T
        return grad_x, (grad_w, grad_b)


def relu(x):
    return np.maximum(x, 0.0)


class Mlp:
    """Projection layer, ``n_hidden`` ReLU blocks of ``width``, linear head."""

    def __init__(self, n_in: int, n_out: int, width: int = 256,
                 n_hidden: int = 3, seed: int = 0, head_gain: float = 0.01):
        rng = np.random.default_rng(seed)
        self.n_in = n_in
        self.n_out = n_out
        self.layers = [Dense.orthogonal(rng, n_in, width, 1.0)]
        self.layers += [Dense.orthogonal(rng, width, width, np.sqrt(2.0))
                        for _ in range(n_hidden)]
        self.layers.append(Dense.orthogonal(rng, width, n_out, head_gain))

    # ------------------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.n_in:
            raise ValueError(f"input has {x.shape[1]} features, net expects {self.n_in}")
        h = self.layers[0].forward(x)
        for layer in self.layers[1:-1]:
            h = relu(layer.forward(h))
        return self.layers[-1].forward(h)

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer inputs and pre-activations."""
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.n_in:
            raise ValueError(f"input has {x.shape[1]} features, net expects {self.n_in}")
        inputs = [x]
        pres = []
        h = self.layers[0].forward(x)
        for layer in self.layers[1:-1]:
            inputs.append(h)
            pre = layer.forward(h)
            pres.append(pre)
            h = relu(pre)
        inputs.append(h)
        out = self.layers[-1].forward(h)
        return out, (inputs, pres)

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss wrt every parameter, given d(loss)/d(out).

        ``cache`` comes from :meth:`forward_cached`.  Returns the gradient
        list aligned with :meth:`parameters`.
        """
        inputs, pres = cache
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        g = np.asarray(grad_out, float)
        g, grads[-1] = self.layers[-1].backward(inputs[-1], g)
        for j in range(len(self.layers) - 2, 0, -1):
            g = g * (pres[j - 1] > 0.0)
            g, grads[j] = self.layers[j].backward(inputs[j], g)
        _, grads[0] = self.layers[0].backward(inputs[0], g)
        out = []
        for gw, gb in grads:
            out.extend((gw, gb))
        return out

    # ------------------------------------------------------------------
    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        return out

    def set_parameters(self, params: list[np.ndarray]):
        own = self.parameters()
        if len(own) != len(params):
            raise ValueError("parameter list length mismatch")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[:] = src

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def clone(self) -> "Mlp":
        out = object.__new__(Mlp)
        out.n_in, out.n_out = self.n_in, self.n_out
        out.layers = [Dense(l.w.copy(), l.b.copy()) for l in self.layers]
        return out


class Adam:
    """First/second-moment adaptive step with bias correction."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise ValueError("gradient list length mismatch")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} vs parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# softmax utilities


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def masked_logits(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Push illegal entries to effectively zero probability."""
    return np.where(mask, logits, logits + MASK_OFFSET)


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(rng.choice(probs.shape[-1], p=probs / probs.sum()))


# ---------------------------------------------------------------------------
# checkpoints: versioned npz of named nets


def save_checkpoint(path: str | Path, nets: dict[str, Mlp],
                    meta: dict | None = None):
    payload = {"__version__": np.int64(CHECKPOINT_VERSION)}
    import json
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    for name, net in nets.items():
        payload[f"{name}::n_in"] = np.int64(net.n_in)
        payload[f"{name}::n_out"] = np.int64(net.n_out)
        for i, p in enumerate(net.parameters()):
            payload[f"{name}::p{i}"] = p
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, list[np.ndarray]], dict]:
    """Returns raw parameter lists per net name plus the meta dict."""
    import json
    with np.load(path) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(data["__meta__"]).decode() or "{}")
        names = sorted({k.split("::")[0] for k in data.files
                        if "::" in k and not k.startswith("__")})
        nets = {}
        for name in names:
            idx = 0
            params = []
            while f"{name}::p{idx}" in data:
                params.append(data[f"{name}::p{idx}"])
                idx += 1
            nets[name] = params
    return nets, meta


def restore_mlp(params: list[np.ndarray], n_in: int | None = None,
                n_out: int | None = None) -> Mlp:
    """Rebuild an Mlp from checkpointed parameters (shape-driven)."""
    if len(params) < 4 or len(params) % 2:
        raise ValueError("parameter list cannot form an Mlp")
    net = object.__new__(Mlp)
    net.layers = [Dense(params[i].copy(), params[i + 1].copy())
                  for i in range(0, len(params), 2)]
    net.n_in = net.layers[0].w.shape[0]
    net.n_out = net.layers[-1].w.shape[1]
    if n_in is not None and net.n_in != n_in:
        raise ValueError(f"checkpoint input width {net.n_in}, expected {n_in}")
    if n_out is not None and net.n_out != n_out:
        raise ValueError(f"checkpoint output width {net.n_out}, expected {n_out}")
    return net


def describe_checkpoint(path: str | Path) -> str:
    """Human-readable layer shapes and parameter norms."""
    nets, meta = load_checkpoint(path)
    lines = [f"checkpoint version {CHECKPOINT_VERSION}"]
    if meta:
        lines.append(f"meta: {meta}")
    for name, params in sorted(nets.items()):
        lines.append(f"[{name}]")
        for i in range(0, len(params), 2):
            w, b = params[i], params[i + 1]
            lines.append(
                f"  layer {i // 2}: W{w.shape} |W|={np.linalg.norm(w):.4f} "
                f"b({b.shape[0]}) |b|={np.linalg.norm(b):.4f}")
    return "\n".join(lines)
