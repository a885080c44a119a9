"""Small dense actor-critic network in numpy with hand-written gradients.

Tanh trunks feed a 5-way policy head and a scalar value head. The value
head either shares the policy trunk or gets its own (``shared=False``).
Everything runs in float64.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError

MASK_LOGIT = -1e8
MODEL_MAGIC = b"DMSSDNET1"
N_ACTIONS = 5
# high bit of the hidden-layer count: value head has its own trunk
SEPARATE_FLAG = 1 << 31


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class PolicyValueNet:
    def __init__(self, input_dim: int, n_p: int, hidden: tuple[int, ...] = (64, 64),
                 n_actions: int = N_ACTIONS, seed: Optional[int] = 0, shared: bool = True):
        self.shared = bool(shared)
        self.input_dim = int(input_dim)
        self.n_p = int(n_p)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_actions = int(n_actions)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        dims = (self.input_dim,) + self.hidden
        for i in range(len(self.hidden)):
            self.params[f"W{i}"] = orthogonal(rng, (dims[i], dims[i + 1]), np.sqrt(2.0))
            self.params[f"b{i}"] = np.zeros(dims[i + 1])
        self.params["Wp"] = orthogonal(rng, (dims[-1], self.n_actions), 0.01)
        self.params["bp"] = np.zeros(self.n_actions)
        if not self.shared:
            for i in range(len(self.hidden)):
                self.params[f"V{i}"] = orthogonal(rng, (dims[i], dims[i + 1]), np.sqrt(2.0))
                self.params[f"c{i}"] = np.zeros(dims[i + 1])
        self.params["Wv"] = orthogonal(rng, (dims[-1], 1), 1.0)
        self.params["bv"] = np.zeros(1)

    @classmethod
    def for_env(cls, n_p: int, seed: Optional[int] = 0, **kw) -> "PolicyValueNet":
        return cls(2 * n_p + 1, n_p, seed=seed, **kw)

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, value, _ = self.forward_cache(obs)
        return logits, value

    def forward_cache(self, obs: np.ndarray):
        x = np.asarray(obs, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.input_dim:
            raise ContractError(f"observation length {x.shape[-1]} != input_dim {self.input_dim}")
        acts = [x]
        h = x
        p = self.params
        for i in range(len(self.hidden)):
            h = np.tanh(h @ p[f"W{i}"] + p[f"b{i}"])
            acts.append(h)
        logits = h @ p["Wp"] + p["bp"]
        if not self.shared:
            hv = x
            for i in range(len(self.hidden)):
                hv = np.tanh(hv @ p[f"V{i}"] + p[f"c{i}"])
                acts.append(hv)
            h = hv
        value = (h @ p["Wv"] + p["bv"])[:, 0]
        if single:
            return logits[0], value[0], acts
        return logits, value, acts

    def backward(self, acts: list[np.ndarray], dlogits: np.ndarray, dvalue: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given seeds dL/dlogits (B, A) and dL/dvalue (B,)."""
        p = self.params
        L = len(self.hidden)
        dlogits = np.atleast_2d(dlogits)
        dvalue = np.atleast_1d(dvalue)[:, None]
        h = acts[L]
        hv = h if self.shared else acts[-1]
        g: dict[str, np.ndarray] = {}
        g["Wp"] = h.T @ dlogits
        g["bp"] = dlogits.sum(axis=0)
        g["Wv"] = hv.T @ dvalue
        g["bv"] = dvalue.sum(axis=0)
        dh = dlogits @ p["Wp"].T
        if self.shared:
            dh = dh + dvalue @ p["Wv"].T
        else:
            trunk = [acts[0]] + acts[L + 1:]
            self._trunk_backward(trunk, dvalue @ p["Wv"].T, "V", "c", g)
        self._trunk_backward(acts[:L + 1], dh, "W", "b", g)
        return {k: g[k] for k in p}

    def _trunk_backward(self, acts, dh, wname, bname, g):
        p = self.params
        for i in reversed(range(len(self.hidden))):
            h = acts[i + 1]
            da = dh * (1.0 - h * h)
            g[f"{wname}{i}"] = acts[i].T @ da
            g[f"{bname}{i}"] = da.sum(axis=0)
            if i:
                dh = da @ p[f"{wname}{i}"].T

    def act(self, obs: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
            greedy: bool = False) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(obs))
        probs = masked_distribution(logits, masks)
        if greedy:
            return np.argmax(probs, axis=-1)
        return sample_actions(probs, rng)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for k, v in self.params.items():
            n = v.size
            self.params[k] = np.asarray(flat[i:i + n], dtype=np.float64).reshape(v.shape).copy()
            i += n

    def copy(self) -> "PolicyValueNet":
        return from_bytes(to_bytes(self))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(to_bytes(self))
        return path


def masked_distribution(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax after overwriting invalid logits with ``MASK_LOGIT``."""
    z = masked_logits(logits, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_logits(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("every action is masked")
    return np.where(mask, logits, MASK_LOGIT)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = masked_logits(logits, mask)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw in fixed action order."""
    return int(sample_actions(np.asarray(probs)[None, :], rng)[0])


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    # u can exceed a cdf total of 1 - tiny; fall back to the last positive entry
    over = idx >= probs.shape[-1]
    if over.any():
        last = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=-1)
        idx = np.where(over, last, idx)
    return idx


def log_prob_entropy(probs: np.ndarray, action: int, mask: Optional[np.ndarray] = None) -> tuple[float, float]:
    probs = np.asarray(probs, dtype=np.float64)
    valid = probs > 0 if mask is None else (np.asarray(mask, dtype=bool) & (probs > 0))
    p = probs[valid]
    entropy = float(-(p * np.log(p)).sum())
    return float(np.log(probs[action])), entropy


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: Optional[float] = None) -> dict[str, np.ndarray]:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: Adam,
              lr: Optional[float] = None) -> dict[str, np.ndarray]:
    return opt.step(params, grads, lr)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


def to_bytes(net: PolicyValueNet) -> bytes:
    n_hidden = len(net.hidden) | (0 if net.shared else SEPARATE_FLAG)
    head = struct.pack("<IIII", net.input_dim, net.n_p, net.n_actions, n_hidden)
    head += struct.pack(f"<{len(net.hidden)}I", *net.hidden)
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in net.params.values())
    payload = MODEL_MAGIC + head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


class ModelFormatError(ContractError):
    pass


def from_bytes(data: bytes) -> PolicyValueNet:
    if len(data) < len(MODEL_MAGIC) + 20 or not data.startswith(MODEL_MAGIC):
        raise ModelFormatError("not a model file")
    payload, trailer = data[:-4], data[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", trailer)[0]:
        raise ModelFormatError("model checksum mismatch")
    off = len(MODEL_MAGIC)
    input_dim, n_p, n_actions, n_hidden = struct.unpack_from("<IIII", payload, off)
    off += 16
    shared = not n_hidden & SEPARATE_FLAG
    n_hidden &= ~SEPARATE_FLAG
    hidden = struct.unpack_from(f"<{n_hidden}I", payload, off)
    off += 4 * n_hidden
    net = PolicyValueNet(input_dim, n_p, hidden, n_actions, seed=None, shared=shared)
    for k, v in net.params.items():
        n = v.size
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off)
        net.params[k] = arr.astype(np.float64).reshape(v.shape)
        off += 8 * n
    if off != len(payload):
        raise ModelFormatError("trailing bytes in model file")
    return net


def load_model(path) -> PolicyValueNet:
    return from_bytes(Path(path).read_bytes())
