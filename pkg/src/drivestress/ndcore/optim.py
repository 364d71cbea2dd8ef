"""Adam optimizer, checkpoints and a finite-difference gradient checker."""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NonFiniteGradientError, ShapeError
from .tensor import Tensor, no_grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    All gradients are checked first so a non-finite value aborts without
    touching any parameter.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    """Write named arrays plus a JSON metadata record to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta["shapes"] = {k: list(v.shape) for k, v in tensors.items()}
    payload = {f"param/{k}": np.asarray(v) for k, v in tensors.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        tensors = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    return tensors, meta


# ---------------------------------------------------------------- gradient check


def gradcheck(fn, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between autodiff and central differences.

    ``fn`` maps the inputs to a scalar Tensor.  The error for each input is
    ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-12)``.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    out.backward()
    auto = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    worst = 0.0
    with no_grad():
        for x, ga in zip(inputs, auto):
            fd = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                fd.reshape(-1)[i] = (fp - fm) / (2 * h)
            denom = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-12)
            worst = max(worst, float(np.linalg.norm(ga - fd) / denom))
    return worst
