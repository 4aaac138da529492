"""Integer-quantized CUBA-LIF network engine for the corner vision network.

The neuron model, per timestep t and neuron i:

    I_t = trunc_to_zero(tau_I * I_{t-1} / 4096) + sum_j w_ff_ij S_j^t
          + w_rec_i * S_i^{t-1}
    U_t = trunc_to_zero(tau_U * U_{t-1} / 4096) * (1 - S_i^{t-1}) + I_t
    S_t = (U_t >= theta)

with integer states, decays tau in [0, 4096] (4096 = no leak), threshold
theta in [0, 131071], and weights that are multiples of 8 in [-256, 248].
Spiking hard-resets the membrane through the (1 - S) factor one step later.
States saturate at +/-(2^23 - 1) with a logged warning.

The vectorized engine keeps states in float64 arrays holding exact integer
values; every operation used (multiply by a 12-bit integer, divide by 4096,
truncate, add, compare) is exact in float64 within the 24-bit state envelope.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .util import atomic_write_text

logger = logging.getLogger(__name__)

WEIGHT_STEP = 8
WEIGHT_MIN = -256
WEIGHT_MAX = 256 - WEIGHT_STEP
TAU_SCALE = 4096
TAU_MAX = 4096
THETA_MAX = 131071
STATE_LIMIT = 2**23 - 1

CHECKPOINT_FORMAT = "evflight-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NeuronParams:
    """Per-layer shared neuron constants (integer domain)."""

    tau_u: int
    tau_i: int
    theta: int

    def __post_init__(self):
        if not (0 <= self.tau_u <= TAU_MAX and 0 <= self.tau_i <= TAU_MAX):
            raise ValueError(f"decays must lie in [0, {TAU_MAX}]")
        if not (0 <= self.theta <= THETA_MAX):
            raise ValueError(f"threshold must lie in [0, {THETA_MAX}]")


def quantize_weight(w) -> np.ndarray | int:
    """Quantize to the nearest multiple of 8 in [-256, 248], ties toward zero.

    Accepts scalars or arrays; scalars come back as python ints.
    """
    arr = np.asarray(w, dtype=np.float64)
    mag = np.ceil(np.abs(arr) / WEIGHT_STEP - 0.5)
    q = np.sign(arr) * mag * WEIGHT_STEP
    q = np.clip(q, WEIGHT_MIN, WEIGHT_MAX)
    if np.isscalar(w) or arr.ndim == 0:
        return int(q)
    return q


def trunc_to_zero(x: np.ndarray) -> np.ndarray:
    """Round toward zero (the hardware's post-decay bit-shift semantics)."""
    return np.trunc(x)


def decay(state: np.ndarray, tau: int) -> np.ndarray:
    """Apply an integer decay: trunc_to_zero(state * tau / 4096)."""
    return np.trunc(state * float(tau) / TAU_SCALE)


def neuron_step(u, i, s_prev, ff, params: NeuronParams, w_rec: int = 0):
    """Scalar reference neuron update. Returns (u_next, i_next, spike).

    All arguments and results are integers; `s_prev` is the neuron's own
    spike on the previous step (drives both self-recurrence and hard reset).
    """
    i_next = _sat_int(_trunc_div(i * params.tau_i) + ff + w_rec * s_prev)
    u_next = _sat_int(_trunc_div(u * params.tau_u) * (1 - s_prev) + i_next)
    spike = 1 if u_next >= params.theta else 0
    return u_next, i_next, spike


def _trunc_div(x: int) -> int:
    q, r = divmod(abs(x), TAU_SCALE)
    return q if x >= 0 else -q


def _sat_int(x: int) -> int:
    if x > STATE_LIMIT:
        return STATE_LIMIT
    if x < -STATE_LIMIT:
        return -STATE_LIMIT
    return x


@dataclass(frozen=True)
class NetworkConfig:
    """Shapes of the five-layer corner network.

    Three stride-2 3x3 convolution encoders with zero padding 1 take the
    2x16x16 input spikes through 8x8, 4x4 and 2x2 spatial grids; a fully
    connected spiking pooling layer follows; a real-valued 2xP decode
    matrix turns pooling spikes into a flow vector in ds px/ms.
    """

    patch: int = 16
    input_channels: int = 2
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    pooling_size: int = 256
    recurrent: tuple[bool, bool, bool, bool] = (True, True, True, False)

    def layer_shapes(self):
        """Per spiking layer: (kind, in_shape, out_shape)."""
        shapes = []
        c_in, hw = self.input_channels, self.patch
        for c_out in self.encoder_channels:
            shapes.append(("conv", (c_in, hw, hw), (c_out, hw // 2, hw // 2)))
            c_in, hw = c_out, hw // 2
        shapes.append(("fc", (c_in, hw, hw), (self.pooling_size,)))
        return shapes

    def layer_sizes(self) -> list[int]:
        return [int(np.prod(s[2])) for s in self.layer_shapes()]

    @property
    def input_size(self) -> int:
        return self.input_channels * self.patch * self.patch

    def neuron_count(self) -> int:
        """All spiking units including the input layer."""
        return self.input_size + sum(self.layer_sizes())

    def synapse_count(self) -> int:
        n = 0
        for (kind, in_shape, out_shape), rec in zip(self.layer_shapes(), self.recurrent):
            out_n = int(np.prod(out_shape))
            if kind == "conv":
                n += out_n * in_shape[0] * 9
            else:
                n += out_n * int(np.prod(in_shape))
            if rec:
                n += out_n
        return n


@dataclass
class LayerWeights:
    """Quantized feedforward kernel plus per-neuron self-recurrence."""

    w: np.ndarray        # conv: (c_out, c_in, 3, 3); fc: (n_out, n_in)
    w_rec: np.ndarray    # (n_out,), zeros when the layer is not recurrent
    params: NeuronParams

    def validate(self):
        for name, arr in (("w", self.w), ("w_rec", self.w_rec)):
            if np.any(arr % WEIGHT_STEP != 0):
                raise ValueError(f"{name} contains values that are not multiples of {WEIGHT_STEP}")
            if arr.min(initial=0) < WEIGHT_MIN or arr.max(initial=0) > WEIGHT_MAX:
                raise ValueError(f"{name} outside [{WEIGHT_MIN}, {WEIGHT_MAX}]")


def _conv_gather_indices(c_in: int, h: int, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Flat gather indices implementing a 3x3 stride-2 pad-1 convolution.

    Returns (idx, (oh, ow)) where idx has shape (oh*ow, c_in*9) and indexes
    the flattened zero-padded input of shape (c_in, h+2, w+2).
    """
    oh, ow = h // 2, w // 2
    ph, pw = h + 2, w + 2
    idx = np.empty((oh * ow, c_in * 9), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            cols = []
            for c in range(c_in):
                for ky in range(3):
                    for kx in range(3):
                        cols.append(c * ph * pw + (oy * 2 + ky) * pw + (ox * 2 + kx))
            idx[oy * ow + ox] = cols
    return idx, (oh, ow)


class QuantizedCornerNet:
    """Vectorized integer inference engine, batched over corner instances.

    Weight tensors are treated as immutable during inference; the four
    corner networks share them and differ only in state, so a batch of four
    (or of anything else) is stepped in one call.
    """

    def __init__(self, config: NetworkConfig, layers: list[LayerWeights], decode: np.ndarray):
        shapes = config.layer_shapes()
        if len(layers) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers, got {len(layers)}")
        self.config = config
        self.layers = layers
        decode = np.asarray(decode, dtype=np.float64)
        if decode.shape != (2, config.pooling_size):
            raise ValueError(
                f"decode matrix must be (2, {config.pooling_size}), got {decode.shape}"
            )
        self.decode = decode

        self._mats = []       # (n_out, n_in_cols) float64 weight matrices
        self._gather = []     # conv gather indices or None for fc
        self._shapes = shapes
        for lw, (kind, in_shape, out_shape) in zip(layers, shapes):
            lw.validate()
            if kind == "conv":
                c_in, h, w = in_shape
                idx, (oh, ow) = _conv_gather_indices(c_in, h, w)
                if lw.w.shape != (out_shape[0], c_in, 3, 3):
                    raise ValueError(f"conv kernel shape {lw.w.shape} mismatch")
                self._mats.append(lw.w.reshape(out_shape[0], c_in * 9).astype(np.float64))
                self._gather.append((idx, in_shape, (oh, ow)))
            else:
                n_in = int(np.prod(in_shape))
                if lw.w.shape != (out_shape[0], n_in):
                    raise ValueError(f"fc weight shape {lw.w.shape} mismatch")
                self._mats.append(lw.w.astype(np.float64))
                self._gather.append(None)
        self._recs = [lw.w_rec.astype(np.float64) for lw in layers]
        self.batch = 0
        self.saturation_events = 0
        self.reset(1)

    @property
    def layer_names(self) -> list[str]:
        return ["input"] + [f"encoder{i+1}" for i in range(len(self.layers) - 1)] + ["pooling"]

    def reset(self, batch: int | None = None):
        """Zero all membrane, current, and previous-spike state."""
        if batch is not None:
            self.batch = batch
        sizes = self.config.layer_sizes()
        self.U = [np.zeros((self.batch, n)) for n in sizes]
        self.I = [np.zeros((self.batch, n)) for n in sizes]
        self.S = [np.zeros((self.batch, n)) for n in sizes]

    def _feedforward(self, li: int, spikes_in: np.ndarray) -> np.ndarray:
        gather = self._gather[li]
        mat = self._mats[li]
        if gather is None:
            return spikes_in @ mat.T
        idx, (c_in, h, w), (oh, ow) = gather
        padded = np.zeros((self.batch, c_in, h + 2, w + 2))
        padded[:, :, 1:-1, 1:-1] = spikes_in.reshape(self.batch, c_in, h, w)
        cols = padded.reshape(self.batch, -1)[:, idx]       # (B, oh*ow, c_in*9)
        out = cols @ mat.T                                  # (B, oh*ow, c_out)
        return out.transpose(0, 2, 1).reshape(self.batch, -1)

    def step(self, input_spikes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance all five layers one synchronous tick.

        `input_spikes` is (batch, 2, 16, 16) binary; returns the pooling
        spike matrix (batch, P) and per-layer mean activity fractions
        (input, encoders..., pooling) averaged over the batch.
        """
        x = np.asarray(input_spikes, dtype=np.float64).reshape(self.batch, -1)
        activity = [float(x.mean())]
        spikes = x
        for li, lw in enumerate(self.layers):
            ff = self._feedforward(li, spikes)
            tau_i, tau_u, theta = lw.params.tau_i, lw.params.tau_u, lw.params.theta
            i_new = self._saturate(
                np.trunc(self.I[li] * tau_i / TAU_SCALE) + ff + self._recs[li] * self.S[li]
            )
            u_new = self._saturate(
                np.trunc(self.U[li] * tau_u / TAU_SCALE) * (1.0 - self.S[li]) + i_new
            )
            s_new = (u_new >= theta).astype(np.float64)
            self.I[li], self.U[li], self.S[li] = i_new, u_new, s_new
            spikes = s_new
            activity.append(float(s_new.mean()))
        return spikes, np.array(activity)

    def _saturate(self, arr: np.ndarray) -> np.ndarray:
        over = np.abs(arr) > STATE_LIMIT
        if np.any(over):
            n = int(over.sum())
            if self.saturation_events == 0:
                logger.warning("neuron state saturated at +/-%d (%d values)", STATE_LIMIT, n)
            self.saturation_events += n
            return np.clip(arr, -STATE_LIMIT, STATE_LIMIT)
        return arr

    def decode_step(self, input_spikes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Step the network and decode pooling spikes to flow (batch, 2)."""
        pool, activity = self.step(input_spikes)
        return decode_flow(pool, self.decode), activity


def decode_flow(pool_spikes: np.ndarray, decode: np.ndarray) -> np.ndarray:
    """Linear decode of pooling spikes into a per-corner flow vector.

    `pool_spikes` is (P,) or (batch, P); the result is ds px/ms.
    """
    pool_spikes = np.asarray(pool_spikes, dtype=np.float64)
    if pool_spikes.shape[-1] != decode.shape[1]:
        raise ValueError(
            f"pooling spike length {pool_spikes.shape[-1]} does not match decode {decode.shape}"
        )
    return pool_spikes @ decode.T


def random_network(
    config: NetworkConfig,
    rng: np.random.Generator,
    tau_range=(1024, 4096),
    theta_range=(64, 2048),
    weight_scale: float = 96.0,
) -> QuantizedCornerNet:
    """Randomly initialized quantized network (tests, bench, smoke runs)."""
    layers = []
    for (kind, in_shape, out_shape), rec in zip(config.layer_shapes(), config.recurrent):
        if kind == "conv":
            shape = (out_shape[0], in_shape[0], 3, 3)
        else:
            shape = (out_shape[0], int(np.prod(in_shape)))
        w = quantize_weight(rng.normal(scale=weight_scale, size=shape))
        n_out = int(np.prod(out_shape))
        w_rec = (
            quantize_weight(rng.normal(scale=weight_scale / 2, size=n_out))
            if rec
            else np.zeros(n_out)
        )
        params = NeuronParams(
            tau_u=int(rng.integers(*tau_range, endpoint=True)),
            tau_i=int(rng.integers(*tau_range, endpoint=True)),
            theta=int(rng.integers(*theta_range, endpoint=True)),
        )
        layers.append(LayerWeights(w=w, w_rec=np.asarray(w_rec, dtype=float), params=params))
    decode = rng.normal(scale=0.05, size=(2, config.pooling_size))
    return QuantizedCornerNet(config, layers, decode)


def _b64_encode(arr: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _b64_decode(payload: str, dtype, shape) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, net: QuantizedCornerNet, meta: dict | None = None,
                    training: dict | None = None) -> None:
    """Write a self-describing, bit-exact JSON checkpoint.

    Integer payloads are little-endian int32 base64; the decode matrix and
    any float training payloads are little-endian float64 base64, so a
    round trip reproduces the network exactly.
    """
    cfg = net.config
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "patch": cfg.patch,
            "input_channels": cfg.input_channels,
            "encoder_channels": list(cfg.encoder_channels),
            "pooling_size": cfg.pooling_size,
            "recurrent": list(cfg.recurrent),
        },
        "layers": [
            {
                "shape": list(lw.w.shape),
                "w": _b64_encode(lw.w, "<i4"),
                "w_rec": _b64_encode(lw.w_rec, "<i4"),
                "tau_u": lw.params.tau_u,
                "tau_i": lw.params.tau_i,
                "theta": lw.params.theta,
            }
            for lw in net.layers
        ],
        "decode": _b64_encode(net.decode, "<f8"),
        "meta": meta or {},
    }
    if training is not None:
        doc["training"] = training
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[QuantizedCornerNet, dict]:
    """Load a checkpoint; returns (network, full document)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    c = doc["config"]
    config = NetworkConfig(
        patch=c["patch"],
        input_channels=c["input_channels"],
        encoder_channels=tuple(c["encoder_channels"]),
        pooling_size=c["pooling_size"],
        recurrent=tuple(bool(r) for r in c["recurrent"]),
    )
    layers = []
    for entry, (kind, in_shape, out_shape) in zip(doc["layers"], config.layer_shapes()):
        shape = tuple(entry["shape"])
        w = _b64_decode(entry["w"], "<i4", shape).astype(np.float64)
        w_rec = _b64_decode(entry["w_rec"], "<i4", (int(np.prod(out_shape)),)).astype(np.float64)
        params = NeuronParams(tau_u=entry["tau_u"], tau_i=entry["tau_i"], theta=entry["theta"])
        layers.append(LayerWeights(w=w, w_rec=w_rec, params=params))
    decode = _b64_decode(doc["decode"], "<f8", (2, config.pooling_size))
    return QuantizedCornerNet(config, layers, decode), doc
