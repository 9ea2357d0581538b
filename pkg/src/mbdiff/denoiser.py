"""Small 1-D U-Net noise predictor with hand-written backpropagation.

Topology: input conv, then per stage a residual block (two convs) and a
stride-4 downsampling conv; a residual bottleneck that receives the projected
conditioning; mirrored stride-4 transposed convs with skip connections; an
output conv. Channel counts grow by ``growth`` per stage. A learned timestep
embedding is projected and added channel-wise after every hidden layer.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .audio import RngStream
from .conditioner import upsample_linear

STRIDE = 4
CHECKPOINT_MAGIC = b"MBDCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 2
    base_channels: int = 8
    growth: int = 4
    kernel: int = 5
    stride: int = STRIDE
    t_embed_dim: int = 16
    T: int = 1000
    cond_dim: int = 16

    def __post_init__(self):
        if self.stride != STRIDE:
            raise ValueError("stride is fixed at 4")
        if self.depth < 1 or self.base_channels < 1 or self.growth < 1:
            raise ValueError("depth, base_channels and growth must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    def channels(self, stage: int) -> int:
        return self.base_channels * self.growth**stage

    @property
    def multiple(self) -> int:
        return self.stride**self.depth


def _shapes(cfg: DenoiserConfig) -> dict:
    E, k = cfg.t_embed_dim, cfg.kernel
    s = {"emb": (cfg.T, E)}

    def conv(name, cin, cout, ksize, embed=True):
        s[name + ".w"] = (cout, cin, ksize)
        s[name + ".b"] = (cout,)
        if embed:
            s[name + ".p"] = (cout, E)

    def res(name, c):
        conv(name + ".a", c, c, k)
        conv(name + ".b", c, c, k)

    c0 = cfg.channels(0)
    conv("in", 1, c0, k)
    for st in range(cfg.depth):
        res(f"enc{st}", cfg.channels(st))
        conv(f"down{st}", cfg.channels(st), cfg.channels(st + 1), STRIDE)
    s["cond.w"] = (cfg.channels(cfg.depth), cfg.cond_dim)
    res("mid", cfg.channels(cfg.depth))
    for st in reversed(range(cfg.depth)):
        # transposed conv weights are stored (cin, cout, k)
        s[f"up{st}.w"] = (cfg.channels(st + 1), cfg.channels(st), STRIDE)
        s[f"up{st}.b"] = (cfg.channels(st),)
        s[f"up{st}.p"] = (cfg.channels(st), E)
        res(f"dec{st}", cfg.channels(st))
    conv("out", c0, 1, k, embed=False)
    return s


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict = field(default_factory=dict)

    def names(self):
        return list(_shapes(self.config))

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> "DenoiserParams":
        out, pos = {}, 0
        for n, shp in _shapes(self.config).items():
            size = int(np.prod(shp))
            out[n] = np.array(vec[pos:pos + size], dtype=np.float64).reshape(shp)
            pos += size
        if pos != vec.size:
            raise ValueError("flat vector size does not match the configuration")
        return DenoiserParams(self.config, out)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]


def init(config: DenoiserConfig, rng: RngStream) -> DenoiserParams:
    """Uniform fan-in initialization; small-normal embedding table."""
    arrays = {}
    for name, shp in _shapes(config).items():
        if name == "emb":
            arrays[name] = 0.5 * rng.normal(shp)
            continue
        if name.endswith(".p") or name == "cond.w":
            fan_in = shp[1]
        elif name.startswith("up") and name.endswith(".w"):
            fan_in = shp[0]
        elif name.endswith(".w"):
            fan_in = shp[1] * shp[2]
        else:
            w = _shapes(config)[name[:-2] + ".w"]
            fan_in = w[0] if name.startswith("up") else w[1] * w[2]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, shp)
    return DenoiserParams(config, arrays)


# --- layer primitives ---------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _swish(z):
    s = _sigmoid(z)
    return z * s, s


def _swish_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def _down(x, w, b):
    B, C, L = x.shape
    xr = x.reshape(B, C, L // STRIDE, STRIDE)
    out = np.tensordot(xr, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    return np.ascontiguousarray(out) + b[None, :, None]


def _down_grad(x, w, g):
    B, C, L = x.shape
    xr = x.reshape(B, C, L // STRIDE, STRIDE)
    gw = np.tensordot(g, xr, axes=([0, 2], [0, 2]))
    gx = np.tensordot(g, w, axes=([1], [0]))  # (B, J, Cin, S)
    gx = np.ascontiguousarray(gx.transpose(0, 2, 1, 3)).reshape(B, C, L)
    return gx, gw, g.sum(axis=(0, 2))


def _up(x, w, b):
    B, C, J = x.shape
    out = np.tensordot(x, w, axes=([1], [0]))  # (B, J, Cout, S)
    out = np.ascontiguousarray(out.transpose(0, 2, 1, 3)).reshape(B, w.shape[1], J * STRIDE)
    return out + b[None, :, None]


def _up_grad(x, w, g):
    B, C, J = x.shape
    g4 = g.reshape(B, g.shape[1], J, STRIDE)
    gw = np.tensordot(x, g4, axes=([0, 2], [0, 2]))
    gx = np.tensordot(g4, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2))


def _check(name, a):
    if not np.all(np.isfinite(a)):
        bad = np.count_nonzero(~np.isfinite(a))
        raise FloatingPointError(f"non-finite activations after layer {name!r} ({bad} values)")


# --- forward / backward ---------------------------------------------------------


def _prepare_cond(cond, batch: int, target_len: int, cond_dim: int):
    if cond is None:
        return None
    c = np.asarray(cond, dtype=np.float64)
    if c.ndim == 2:
        c = np.broadcast_to(c, (batch,) + c.shape)
    if c.ndim != 3 or c.shape[0] != batch or c.shape[2] != cond_dim:
        raise ValueError(f"conditioning must be (n_frames, {cond_dim}) or (batch, n_frames, {cond_dim})")
    if c.shape[1] == target_len:
        return np.ascontiguousarray(c)
    return np.stack([upsample_linear(ci, target_len) for ci in c])


def forward_batch(params: DenoiserParams, x, t, cond=None, keep=False):
    """Predict noise for a batch ``x`` of shape ``(B, L)``.

    ``t`` is a scalar or a length-B integer array in ``1..T``. ``cond`` is
    ``None`` or per-frame conditioning, upsampled linearly to the bottleneck
    length. With ``keep=True`` the activation cache for :func:`backward` is
    returned as a second value.
    """
    cfg = params.config
    P = params.arrays
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be (batch, length)")
    B, L = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if t.min() < 1 or t.max() > cfg.T:
        raise ValueError(f"step outside 1..{cfg.T}")
    m = cfg.multiple
    total = -(-L // m) * m
    left = (total - L) // 2
    xin = np.zeros((B, 1, total))
    xin[:, 0, left:left + L] = x
    e = P["emb"][t - 1]  # (B, E)
    cb = _prepare_cond(cond, B, total // m, cfg.cond_dim)

    tape = []

    def conv_layer(name, h, act=True):
        z = kernels.conv1d(h, P[name + ".w"], P[name + ".b"])
        z += (e @ P[name + ".p"].T)[:, :, None]
        if not act:
            tape.append(("conv", name, h, None, None))
            return z
        y, s = _swish(z)
        tape.append(("conv", name, h, z, s))
        return y

    def res_block(name, h):
        r = conv_layer(name + ".a", h)
        r = conv_layer(name + ".b", r, act=False)
        tape.append(("add", name))
        return h + r

    h = conv_layer("in", xin)
    skips = []
    for st in range(cfg.depth):
        h = res_block(f"enc{st}", h)
        skips.append(h)
        name = f"down{st}"
        z = _down(h, P[name + ".w"], P[name + ".b"]) + (e @ P[name + ".p"].T)[:, :, None]
        y, s = _swish(z)
        tape.append(("down", name, h, z, s))
        h = y
    if cb is not None:
        h = h + np.einsum("cd,bld->bcl", P["cond.w"], cb)
    tape.append(("cond", cb))
    h = res_block("mid", h)
    for st in reversed(range(cfg.depth)):
        name = f"up{st}"
        z = _up(h, P[name + ".w"], P[name + ".b"]) + (e @ P[name + ".p"].T)[:, :, None]
        y, s = _swish(z)
        tape.append(("up", name, h, z, s))
        h = y + skips[st]
        tape.append(("skip", st))
        h = res_block(f"dec{st}", h)
    out = kernels.conv1d(h, P["out.w"], P["out.b"])
    tape.append(("out", h))
    _check("out", out)
    y = out[:, 0, left:left + L]
    if keep:
        return y, {"tape": tape, "t": t, "e": e, "left": left, "L": L, "total": total}
    return y


def backward(params: DenoiserParams, cache: dict, grad_out) -> DenoiserParams:
    """Reverse-mode pass through the tape recorded by :func:`forward_batch`."""
    cfg = params.config
    P = params.arrays
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    tape = cache["tape"]
    e, t = cache["e"], cache["t"]
    B = e.shape[0]
    g = np.zeros((B, 1, cache["total"]))
    g[:, 0, cache["left"]:cache["left"] + cache["L"]] = grad_out
    ge = np.zeros_like(e)

    def embed_grad(name, gz):
        nonlocal ge
        gpe = gz.sum(axis=2)  # (B, C)
        grads[name + ".p"] += gpe.T @ e
        ge = ge + gpe @ P[name + ".p"]

    # residual branch bookkeeping: at an "add" the incoming grad feeds both the
    # identity path and the branch; at a "skip" it also flows to the encoder copy.
    res_stack = []
    skip_grads = {}
    i = len(tape) - 1
    _, h_out = tape[i]
    gx, gw, gb = kernels.conv1d_grad(h_out, P["out.w"], g[:, :, :])
    grads["out.w"] += gw
    grads["out.b"] += gb
    g = gx
    i -= 1
    while i >= 0:
        entry = tape[i]
        kind = entry[0]
        if kind == "add":
            res_stack.append(g)
        elif kind == "conv":
            _, name, h_in, z, s = entry
            gz = g if z is None else g * _swish_grad(z, s)
            embed_grad(name, gz)
            gx, gw, gb = kernels.conv1d_grad(h_in, P[name + ".w"], gz)
            grads[name + ".w"] += gw
            grads[name + ".b"] += gb
            g = gx
            if name.endswith(".a"):
                g = g + res_stack.pop()
        elif kind == "skip":
            skip_grads[entry[1]] = g
        elif kind == "up":
            _, name, h_in, z, s = entry
            gz = g * _swish_grad(z, s)
            embed_grad(name, gz)
            gx, gw, gb = _up_grad(h_in, P[name + ".w"], gz)
            grads[name + ".w"] += gw
            grads[name + ".b"] += gb
            g = gx
        elif kind == "cond":
            cb = entry[1]
            if cb is not None:
                grads["cond.w"] += np.einsum("bcl,bld->cd", g, cb)
        elif kind == "down":
            _, name, h_in, z, s = entry
            gz = g * _swish_grad(z, s)
            embed_grad(name, gz)
            gx, gw, gb = _down_grad(h_in, P[name + ".w"], gz)
            grads[name + ".w"] += gw
            grads[name + ".b"] += gb
            st = int(name[4:])
            g = gx + skip_grads.pop(st)
        i -= 1
    np.add.at(grads["emb"], t - 1, ge)
    return DenoiserParams(cfg, grads)


def forward(params: DenoiserParams, x_t, t: int, cond=None) -> np.ndarray:
    """Single-sequence noise prediction; ``x_t`` is 1-D."""
    x = np.asarray(x_t, dtype=np.float64)
    return forward_batch(params, x[None, :], t, None if cond is None else np.asarray(cond)[None])[0]


@dataclass(frozen=True)
class Preconditioner:
    """Fixed analytic wrapper around the network.

    With ``a = alpha_bar_t``, ``v = a * sigma_data**2 + 1 - a`` the output is
    ``eps_hat = c_skip * x_t + c_out * F(c_in * x_t)`` where
    ``c_skip = sqrt(1 - a) / v`` is the noise estimate that is optimal for
    zero-mean Gaussian data of std ``sigma_data``, ``c_in = 1 / sqrt(v)``
    gives the network unit-scale input and ``c_out = sqrt(a) * sigma_data /
    sqrt(v)`` is the std of what that estimate leaves unexplained.
    """

    alphas_bar: np.ndarray  # alpha_bar for t = 1..T
    sigma_data: float

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    def coefficients(self, t):
        a = np.asarray(self.alphas_bar, dtype=np.float64)[np.asarray(t, dtype=np.int64) - 1]
        v = a * self.sigma_data**2 + (1.0 - a)
        return 1.0 / np.sqrt(v), np.sqrt(1.0 - a) / v, np.sqrt(a) * self.sigma_data / np.sqrt(v)


def _col(c, B):
    return np.broadcast_to(np.asarray(c, dtype=np.float64), (B,))[:, None]


def predict_batch(params: DenoiserParams, x, t, cond=None, precond: Preconditioner | None = None):
    """Noise prediction for ``(B, L)`` input, optionally preconditioned."""
    if precond is None:
        return forward_batch(params, x, t, cond)
    x = np.asarray(x, dtype=np.float64)
    c_in, c_skip, c_out = (_col(c, x.shape[0]) for c in precond.coefficients(t))
    return c_skip * x + c_out * forward_batch(params, c_in * x, t, cond)


def loss_and_grad(params: DenoiserParams, x_t, t, eps, cond=None, precond: Preconditioner | None = None):
    """Mean squared noise-prediction error over a batch, and its gradient."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if x_t.shape[0] == 0:
        raise ValueError("empty batch")
    if precond is None:
        eps_hat, cache = forward_batch(params, x_t, t, cond, keep=True)
        scale = 1.0
    else:
        c_in, c_skip, scale = (_col(c, x_t.shape[0]) for c in precond.coefficients(t))
        f, cache = forward_batch(params, c_in * x_t, t, cond, keep=True)
        eps_hat = c_skip * x_t + scale * f
    diff = eps_hat - eps
    loss = float(np.mean(diff**2))
    grads = backward(params, cache, scale * (2.0 * diff / diff.size))
    return loss, grads


class Model:
    """Adapter exposing ``predict(x_t, t, cond)`` for the sampler.

    Accepts 1-D or batched ``(B, L)`` inputs.
    """

    def __init__(self, params: DenoiserParams, precond: Preconditioner | None = None):
        self.params = params
        self.precond = precond

    def predict(self, x_t, t, cond=None):
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim == 1:
            c = None if cond is None else np.asarray(cond)[None]
            return predict_batch(self.params, x[None, :], t, c, self.precond)[0]
        return predict_batch(self.params, x, t, cond, self.precond)


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: DenoiserParams, lr: float = 1e-4, **kw) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return cls(zeros, {k: v.copy() for k, v in zeros.items()}, 0, lr, **kw)


def train_step(params: DenoiserParams, opt: OptimizerState, grads: DenoiserParams):
    """Bias-corrected Adam update; returns new ``(params, opt)``."""
    step = opt.step + 1
    c1 = 1.0 - opt.beta1**step
    c2 = 1.0 - opt.beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads.arrays[k]
        m = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        new_p[k] = p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        new_m[k], new_v[k] = m, v
    return (DenoiserParams(params.config, new_p),
            OptimizerState(new_m, new_v, step, opt.lr, opt.beta1, opt.beta2, opt.eps))


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: DenoiserParams, opt: OptimizerState | None = None, meta: dict | None = None) -> str:
    """Binary checkpoint plus a ``.json`` sidecar; returns the payload sha256."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "n_params": params.count(),
        "has_optimizer": opt is not None,
    }
    if opt is not None:
        header["optimizer"] = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(hb)), hb, params.flat().astype("<f8").tobytes()]
    if opt is not None:
        names = params.names()
        parts.append(np.concatenate([opt.m[n].ravel() for n in names]).astype("<f8").tobytes())
        parts.append(np.concatenate([opt.v[n].ravel() for n in names]).astype("<f8").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    sidecar = dict(meta or {})
    sidecar.update({"config": header["config"], "checkpoint_sha256": digest})
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return digest


def load_checkpoint(path):
    """Returns ``(params, optimizer_or_None, sidecar_dict)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    cfg = DenoiserConfig(**header["config"])
    n = header["n_params"]
    body = np.frombuffer(blob[12 + hlen:], dtype="<f8")
    template = DenoiserParams(cfg, {})
    params = template.with_flat(body[:n])
    opt = None
    if header["has_optimizer"]:
        m = template.with_flat(body[n:2 * n]).arrays
        v = template.with_flat(body[2 * n:3 * n]).arrays
        opt = OptimizerState(m, v, **header["optimizer"])
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        sidecar = {}
    return params, opt, sidecar
