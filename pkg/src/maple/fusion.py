"""The trainable fusion head: concatenate essay/prompt/rubric/feature vectors,
gate them element-wise with a sigmoid of a learned linear map, then project
back to d dimensions through a dropout + ReLU layer.

    z  = [essay; prompt; rubric; features]        (context and features optional)
    g  = sigmoid(W_z z)
    h  = z * g
    out = W_2 relu(dropout(W_1 h + b_1)) + b_2

Dropout is inverted: training masks scale surviving units by 1/(1-rate) so
evaluation applies the identity. All math is float64 so analytic gradients can
be checked against finite differences tightly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MHD1"

_PARAM_FIELDS = ("w_z", "w_1", "b_1", "w_2", "b_2")


class ShapeError(ValueError):
    """Input vector shapes disagree with the head configuration."""


@dataclass(frozen=True)
class HeadConfig:
    d: int
    d_u: int = 0
    use_context: bool = True
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.d_u < 0:
            raise ValueError("d_u must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def z_dim(self) -> int:
        return self.d * (3 if self.use_context else 1) + self.d_u


@dataclass
class HeadParams:
    w_z: np.ndarray  # (z_dim, z_dim)
    w_1: np.ndarray  # (z_dim, z_dim)
    b_1: np.ndarray  # (z_dim,)
    w_2: np.ndarray  # (d, z_dim)
    b_2: np.ndarray  # (d,)

    def copy(self) -> "HeadParams":
        return HeadParams(*(getattr(self, f).copy() for f in _PARAM_FIELDS))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in _PARAM_FIELDS]

    def check_finite(self) -> None:
        for f in _PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"non-finite entries in {f}")

    @staticmethod
    def zeros(config: HeadConfig) -> "HeadParams":
        z, d = config.z_dim, config.d
        return HeadParams(
            w_z=np.zeros((z, z)),
            w_1=np.zeros((z, z)),
            b_1=np.zeros(z),
            w_2=np.zeros((d, z)),
            b_2=np.zeros(d),
        )


def init_params(config: HeadConfig, rng: np.random.Generator) -> HeadParams:
    """Xavier-uniform weights, zero biases.

    Keeps the gate near sigmoid(small) ~ 0.5 at the start, an unbiased soft
    mixer of the input segments.
    """
    z, d = config.z_dim, config.d

    def xavier(fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    return HeadParams(
        w_z=xavier(z, z, (z, z)),
        w_1=xavier(z, z, (z, z)),
        b_1=np.zeros(z),
        w_2=xavier(z, d, (d, z)),
        b_2=np.zeros(d),
    )


@dataclass
class ForwardTrace:
    """Cached intermediates from one forward call, enough for exact backprop."""

    config: HeadConfig
    mode: str
    single: bool  # caller passed 1-D vectors
    z: np.ndarray  # (n, z_dim)
    gate: np.ndarray  # (n, z_dim)
    h: np.ndarray  # (n, z_dim)
    pre_act: np.ndarray  # (n, z_dim)  W_1 h + b_1
    keep_scale: np.ndarray | None  # (n, z_dim) dropout mask / (1-rate), None in eval
    hidden: np.ndarray  # (n, z_dim)  relu(dropout(pre_act))


def _as_rows(name: str, vec: np.ndarray, width: int, n_rows: int | None) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{name} must have width {width}, got shape {arr.shape}")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ShapeError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {name}")
    return arr


def assemble_z(
    config: HeadConfig,
    essay_vec: np.ndarray,
    prompt_vec: np.ndarray | None = None,
    rubric_vec: np.ndarray | None = None,
    feature_vec: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Concatenate the enabled input segments into z rows.

    Context or feature vectors supplied while the config disables them are a
    shape error: disabled segments are absent from z by construction.
    """
    single = np.asarray(essay_vec).ndim == 1
    essay = _as_rows("essay_vec", essay_vec, config.d, None)
    n = essay.shape[0]
    parts = [essay]
    if config.use_context:
        if prompt_vec is None or rubric_vec is None:
            raise ShapeError("use_context=True requires prompt_vec and rubric_vec")
        parts.append(_as_rows("prompt_vec", prompt_vec, config.d, n))
        parts.append(_as_rows("rubric_vec", rubric_vec, config.d, n))
    elif prompt_vec is not None or rubric_vec is not None:
        raise ShapeError("prompt/rubric vectors given but use_context=False")
    if config.d_u > 0:
        if feature_vec is None:
            raise ShapeError(f"d_u={config.d_u} requires feature_vec")
        parts.append(_as_rows("feature_vec", feature_vec, config.d_u, n))
    elif feature_vec is not None:
        raise ShapeError("feature_vec given but d_u=0")
    return np.concatenate(parts, axis=1), single


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(
    params: HeadParams,
    config: HeadConfig,
    essay_vec: np.ndarray,
    prompt_vec: np.ndarray | None = None,
    rubric_vec: np.ndarray | None = None,
    feature_vec: np.ndarray | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the head on one vector set or a batch of rows.

    Train mode draws an independent dropout mask per row and requires `rng`;
    eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    z, single = assemble_z(config, essay_vec, prompt_vec, rubric_vec, feature_vec)

    gate = _sigmoid(z @ params.w_z.T)
    h = z * gate
    pre_act = h @ params.w_1.T + params.b_1
    if mode == "train" and config.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout requires rng")
        keep = rng.random(pre_act.shape) >= config.dropout_rate
        keep_scale = keep / (1.0 - config.dropout_rate)
        dropped = pre_act * keep_scale
    else:
        keep_scale = None
        dropped = pre_act
    hidden = np.maximum(dropped, 0.0)
    out = hidden @ params.w_2.T + params.b_2
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite head output")
    trace = ForwardTrace(config=config, mode=mode, single=single, z=z, gate=gate,
                         h=h, pre_act=pre_act, keep_scale=keep_scale, hidden=hidden)
    return (out[0] if single else out), trace


@dataclass
class InputGrads:
    essay: np.ndarray
    prompt: np.ndarray | None
    rubric: np.ndarray | None
    features: np.ndarray | None


def backward(
    trace: ForwardTrace,
    params: HeadParams,
    grad_out: np.ndarray,
) -> tuple[HeadParams, InputGrads]:
    """Gradients of <grad_out, output> w.r.t. parameters and input segments.

    The gate contributes two paths into z:
        dh/dz = diag(g) + diag(z) diag(g(1-g)) W_z
    """
    config = trace.config
    g_out = np.asarray(grad_out, dtype=np.float64)
    if g_out.ndim == 1:
        g_out = g_out[None, :]
    if g_out.shape != (trace.z.shape[0], config.d):
        raise ShapeError(
            f"grad_out shape {g_out.shape} does not match trace "
            f"({trace.z.shape[0]}, {config.d})"
        )
    if params.w_z.shape[0] != config.z_dim:
        raise ShapeError("params do not match the trace's config")

    grad_w_2 = g_out.T @ trace.hidden
    grad_b_2 = g_out.sum(axis=0)
    grad_hidden = g_out @ params.w_2

    if trace.keep_scale is not None:
        relu_in = trace.pre_act * trace.keep_scale
        grad_dropped = grad_hidden * (relu_in > 0)
        grad_pre = grad_dropped * trace.keep_scale
    else:
        grad_pre = grad_hidden * (trace.pre_act > 0)

    grad_w_1 = grad_pre.T @ trace.h
    grad_b_1 = grad_pre.sum(axis=0)
    grad_h = grad_pre @ params.w_1

    grad_z = grad_h * trace.gate
    grad_gate = grad_h * trace.z
    grad_a = grad_gate * trace.gate * (1.0 - trace.gate)
    grad_w_z = grad_a.T @ trace.z
    grad_z += grad_a @ params.w_z

    d, d_u = config.d, config.d_u
    pos = d
    if config.use_context:
        grad_prompt: np.ndarray | None = grad_z[:, pos : pos + d]
        grad_rubric: np.ndarray | None = grad_z[:, pos + d : pos + 2 * d]
        pos += 2 * d
    else:
        grad_prompt = None
        grad_rubric = None
    grad_features = grad_z[:, pos : pos + d_u] if d_u > 0 else None

    def maybe_squeeze(arr: np.ndarray | None) -> np.ndarray | None:
        if arr is None:
            return None
        return arr[0] if trace.single else arr

    param_grads = HeadParams(w_z=grad_w_z, w_1=grad_w_1, b_1=grad_b_1,
                             w_2=grad_w_2, b_2=grad_b_2)
    input_grads = InputGrads(
        essay=maybe_squeeze(grad_z[:, :d]),
        prompt=maybe_squeeze(grad_prompt),
        rubric=maybe_squeeze(grad_rubric),
        features=maybe_squeeze(grad_features),
    )
    return param_grads, input_grads


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: HeadParams, config: HeadConfig) -> None:
    """Magic, u32 JSON-header length, the header, then row-major float64
    little-endian W_z, W_1, b_1, W_2, b_2."""
    header = json.dumps(
        {
            "d": config.d,
            "d_u": config.d_u,
            "use_context": config.use_context,
            "dropout_rate": config.dropout_rate,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[HeadParams, HeadConfig]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a head checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    config = HeadConfig(
        d=int(header["d"]),
        d_u=int(header["d_u"]),
        use_context=bool(header["use_context"]),
        dropout_rate=float(header["dropout_rate"]),
    )
    z, d = config.z_dim, config.d
    shapes = [(z, z), (z, z), (z,), (d, z), (d,)]
    offset = 8 + hlen
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
        arrays.append(arr.reshape(shape).astype(np.float64))
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return HeadParams(*arrays), config
