"""Quantization-aware self-supervised training of the corner vision network.

The forward pass runs the exact integer neuron semantics of the inference
engine (float64 tensors holding integers; multiply/divide-by-4096/truncate
are exact in that range), while the backward pass is floating point:
straight-through estimators across every quantization and truncation point
and an inverse-tangent surrogate at the spike threshold. Gradients travel
through the decode matrix, the differentiable four-point homography solve,
the event warping chain, and the recurrent neuron dynamics (hard reset
excluded by design); 25 ms of buffered event-flow tuples are processed per
update, after which states are detached and the buffer cleared.

A relaxed mode (no quantization, smooth sigmoid spikes, differentiable
reset) exists purely so the backpropagation machinery can be checked
against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import snn
from .homography import (
    WINDOW_MS,
    CameraModel,
    CornerFlowSet,
    CORNER_NAMES,
    convert_corner_flows,
    corner_flows_from_Hdot,
    continuous_homography,
    epe,
)
from .loss import (
    EventFlowBuffer,
    SMOOTHNESS_WEIGHT,
    smoothness_loss,
    training_contrast_loss,
    window_from_arrays,
)
from .quadsim import quat_multiply, quat_rotate, quat_to_euler
from .snn import NetworkConfig, STATE_LIMIT, TAU_MAX, TAU_SCALE, THETA_MAX, WEIGHT_MAX, WEIGHT_MIN, WEIGHT_STEP
from .synth import TextureConfig, generate_sequence
from .util import write_csv

logger = logging.getLogger(__name__)

SURROGATE_GAMMA = 10.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def surrogate_grad(x):
    """Inverse-tangent surrogate derivative 1 / (1 + gamma x^2), gamma=10."""
    if torch.is_tensor(x):
        return 1.0 / (1.0 + SURROGATE_GAMMA * x * x)
    return 1.0 / (1.0 + SURROGATE_GAMMA * x * x)


class _SpikeFn(torch.autograd.Function):
    """Heaviside spike with a threshold-normalized surrogate backward.

    The surrogate argument is the membrane distance in units of the
    threshold, x = (u - theta) / max(theta, 1); the returned gradient is
    the bare surrogate value (no 1/scale factor), which keeps gradient
    magnitudes of order one through deep stacks of integer-domain layers.
    """

    @staticmethod
    def forward(ctx, u, theta, scale):
        ctx.save_for_backward(u, theta, scale)
        return (u >= theta).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        u, theta, scale = ctx.saved_tensors
        x = (u - theta) / scale
        sg = grad_out * surrogate_grad(x) / scale
        grad_theta = -sg.sum().reshape(theta.shape)
        return sg, grad_theta, None


def _ste_round(x):
    return x + (torch.round(x) - x).detach()


def _ste_trunc(x):
    return x + (torch.trunc(x) - x).detach()


def _quantize_weight_torch(w):
    mag = torch.ceil(torch.abs(w) / WEIGHT_STEP - 0.5)
    q = torch.sign(w) * mag * WEIGHT_STEP
    return torch.clamp(q, WEIGHT_MIN, WEIGHT_MAX)


def _ste_weight(w):
    return w + (_quantize_weight_torch(w) - w).detach()


# master-parameter scales: one Adam step of size lr moves a weight by
# lr*WEIGHT_UNIT integer units, a decay by lr*TAU_SCALE, a threshold by
# lr*THETA_UNIT. The threshold unit is a typical working magnitude, not the
# hardware maximum, so Adam's fixed-size steps stay proportionate for all
# groups under one learning rate.
WEIGHT_UNIT = 256.0
THETA_UNIT = 4096.0


class QuantLIFLayer(nn.Module):
    """One spiking layer: conv or dense feedforward, per-neuron
    self-recurrence, shared learnable decays and threshold.

    Masters are stored normalized (weights in [-1, 1), decays in [0, 1],
    threshold in [0, 1)) and scaled to the integer domain in the forward
    pass, where they are quantized with straight-through estimators.
    """

    def __init__(self, kind: str, in_shape, out_shape, recurrent: bool,
                 rng: np.random.Generator, weight_scale: float = 96.0,
                 tau_u: float = 3072.0, tau_i: float = 2048.0, theta: float = 256.0):
        super().__init__()
        self.kind = kind
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.recurrent = recurrent
        if kind == "conv":
            w = rng.uniform(-weight_scale, weight_scale, size=(out_shape[0], in_shape[0], 3, 3))
        else:
            w = rng.uniform(-weight_scale, weight_scale,
                            size=(out_shape[0], int(np.prod(in_shape))))
        self.weight_n = nn.Parameter(torch.as_tensor(w / WEIGHT_UNIT, dtype=torch.float64))
        rec = rng.uniform(-16.0, 16.0, size=self.out_shape) if recurrent else np.zeros(self.out_shape)
        self.w_rec_n = nn.Parameter(torch.as_tensor(rec / WEIGHT_UNIT, dtype=torch.float64),
                                    requires_grad=recurrent)
        self.tau_u_n = nn.Parameter(torch.tensor(tau_u / TAU_SCALE, dtype=torch.float64))
        self.tau_i_n = nn.Parameter(torch.tensor(tau_i / TAU_SCALE, dtype=torch.float64))
        self.theta_n = nn.Parameter(torch.tensor(theta / THETA_UNIT, dtype=torch.float64))
        self.register_buffer("relaxed_scale", torch.tensor(max(float(theta), 1.0), dtype=torch.float64))

    # integer-domain views of the masters
    def weight_int(self):
        return self.weight_n * WEIGHT_UNIT

    def w_rec_int(self):
        return self.w_rec_n * WEIGHT_UNIT

    def tau_int(self):
        return self.tau_u_n * TAU_SCALE, self.tau_i_n * TAU_SCALE

    def theta_int(self):
        return self.theta_n * THETA_UNIT

    def zero_state(self, batch: int):
        shape = (batch, *self.out_shape)
        z = torch.zeros(shape, dtype=torch.float64)
        return (z, z.clone(), z.clone())

    def _feedforward(self, x, w):
        if self.kind == "conv":
            return F.conv2d(x, w, stride=2, padding=1)
        return F.linear(x.reshape(x.shape[0], -1), w)

    def forward(self, x, state, quantized: bool = True, relaxed: bool = False):
        u_prev, i_prev, s_prev = state
        tau_u_i, tau_i_i = self.tau_int()
        if relaxed:
            tau_u = torch.clamp(tau_u_i, 0, TAU_MAX) / TAU_SCALE
            tau_i = torch.clamp(tau_i_i, 0, TAU_MAX) / TAU_SCALE
            theta = self.theta_int()
            ff = self._feedforward(x, self.weight_int())
            i_new = i_prev * tau_i + ff + self.w_rec_int() * s_prev
            u_new = u_prev * tau_u * (1.0 - s_prev) + i_new
            s_new = torch.sigmoid(4.0 * (u_new - theta) / self.relaxed_scale)
            return s_new, (u_new, i_new, s_new)

        w_q = _ste_weight(self.weight_int())
        rec_q = _ste_weight(self.w_rec_int())
        tau_u_q = _ste_round(torch.clamp(tau_u_i, 0, TAU_MAX))
        tau_i_q = _ste_round(torch.clamp(tau_i_i, 0, TAU_MAX))
        theta_q = _ste_round(torch.clamp(self.theta_int(), 0, THETA_MAX))

        ff = self._feedforward(x, w_q)
        i_new = _ste_trunc(i_prev * tau_i_q / TAU_SCALE) + ff + rec_q * s_prev
        i_new = torch.clamp(i_new, -STATE_LIMIT, STATE_LIMIT)
        u_new = _ste_trunc(u_prev * tau_u_q / TAU_SCALE) * (1.0 - s_prev.detach()) + i_new
        u_new = torch.clamp(u_new, -STATE_LIMIT, STATE_LIMIT)
        scale = torch.clamp(theta_q.detach(), min=1.0)
        s_new = _SpikeFn.apply(u_new, theta_q, scale)
        return s_new, (u_new, i_new, s_new)


# per-layer (tau_u, tau_i, theta) defaults, tuned so a fresh network is
# moderately active on typical corner-event densities
_LAYER_INIT = ((3072.0, 2048.0, 192.0), (3072.0, 2048.0, 768.0),
               (3072.0, 2048.0, 1024.0), (3072.0, 2048.0, 768.0))


class CornerVisionNet(nn.Module):
    """Trainable five-layer corner network with real-valued flow decode."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0,
                 weight_scale: float = 96.0, decode_scale: float = 0.01):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        layers = []
        inits = list(_LAYER_INIT)
        while len(inits) < len(config.layer_shapes()):
            inits.insert(-1, inits[-2])
        for (kind, in_shape, out_shape), rec, (tu, ti, th) in zip(
            config.layer_shapes(), config.recurrent, inits
        ):
            layers.append(
                QuantLIFLayer(kind, in_shape, out_shape, rec, rng,
                              weight_scale=weight_scale, tau_u=tu, tau_i=ti, theta=th)
            )
        self.layers = nn.ModuleList(layers)
        self.decode = nn.Parameter(
            torch.as_tensor(rng.normal(scale=decode_scale, size=(2, config.pooling_size)),
                            dtype=torch.float64)
        )

    def zero_state(self, batch: int):
        return [layer.zero_state(batch) for layer in self.layers]

    @staticmethod
    def detach_state(state):
        return [tuple(t.detach() for t in layer_state) for layer_state in state]

    def forward(self, spikes, state, quantized: bool = True, relaxed: bool = False):
        """One tick: input spikes (B, 2, 16, 16) through all layers.

        Returns (flows px/ms (B, 2), pooling spikes, activity list, state).
        """
        x = spikes
        activity = [float(spikes.detach().mean())]
        new_state = []
        for layer in self.layers:
            x, st = layer(x, state[len(new_state)], quantized=quantized, relaxed=relaxed)
            new_state.append(st)
            activity.append(float(x.detach().mean()))
        pool = x.reshape(x.shape[0], -1)
        flows = pool @ self.decode.T
        return flows, pool, activity, new_state

    @torch.no_grad()
    def clamp_parameters(self):
        """Clamp all learnable masters to their hardware ranges."""
        for layer in self.layers:
            layer.weight_n.clamp_(WEIGHT_MIN / WEIGHT_UNIT, WEIGHT_MAX / WEIGHT_UNIT)
            layer.w_rec_n.clamp_(WEIGHT_MIN / WEIGHT_UNIT, WEIGHT_MAX / WEIGHT_UNIT)
            layer.tau_u_n.clamp_(0, 1.0)
            layer.tau_i_n.clamp_(0, 1.0)
            layer.theta_n.clamp_(0, THETA_MAX / THETA_UNIT)

    @torch.no_grad()
    def export_quantized(self) -> snn.QuantizedCornerNet:
        """Materialize the integer inference network from the masters."""
        layers = []
        for layer in self.layers:
            w = snn.quantize_weight(layer.weight_int().numpy())
            rec = snn.quantize_weight(layer.w_rec_int().numpy()).reshape(-1)
            params = snn.NeuronParams(
                tau_u=int(np.rint(np.clip(layer.tau_int()[0].item(), 0, TAU_MAX))),
                tau_i=int(np.rint(np.clip(layer.tau_int()[1].item(), 0, TAU_MAX))),
                theta=int(np.rint(np.clip(layer.theta_int().item(), 0, THETA_MAX))),
            )
            layers.append(snn.LayerWeights(w=np.asarray(w, dtype=float),
                                           w_rec=np.asarray(rec, dtype=float), params=params))
        return snn.QuantizedCornerNet(self.config, layers, self.decode.numpy().copy())

    @torch.no_grad()
    def load_quantized(self, net: snn.QuantizedCornerNet):
        """Adopt an integer network's weights as the float masters."""
        for layer, lw in zip(self.layers, net.layers):
            layer.weight_n.copy_(torch.as_tensor(lw.w / WEIGHT_UNIT, dtype=torch.float64))
            layer.w_rec_n.copy_(
                torch.as_tensor(lw.w_rec.reshape(layer.out_shape) / WEIGHT_UNIT, dtype=torch.float64)
            )
            layer.tau_u_n.fill_(lw.params.tau_u / TAU_SCALE)
            layer.tau_i_n.fill_(lw.params.tau_i / TAU_SCALE)
            layer.theta_n.fill_(lw.params.theta / THETA_UNIT)
        self.decode.copy_(torch.as_tensor(net.decode, dtype=torch.float64))

    def training_payload(self) -> dict:
        """Float master parameters for checkpoint resume."""
        payload = {}
        for name, p in self.named_parameters():
            payload[name] = {
                "shape": list(p.shape),
                "data": snn._b64_encode(p.detach().numpy(), "<f8"),
            }
        return payload

    @torch.no_grad()
    def load_training_payload(self, payload: dict):
        for name, p in self.named_parameters():
            entry = payload[name]
            arr = snn._b64_decode(entry["data"], "<f8", tuple(entry["shape"]))
            p.copy_(torch.as_tensor(arr, dtype=torch.float64))


@dataclass
class TrainState:
    """Shadow master parameters plus optimizer and step counter."""

    net: CornerVisionNet
    optimizer: torch.optim.Adam
    step: int = 0


def make_train_state(net: CornerVisionNet, lr: float = 1e-4) -> TrainState:
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    return TrainState(net=net, optimizer=opt)


class NonFiniteGradient(RuntimeError):
    pass


GRAD_CLIP_NORM = 10.0


def bptt_step(net: CornerVisionNet, buffers: list[EventFlowBuffer],
              margin: int = 12) -> tuple[dict, dict]:
    """Backward pass over one batch of full buffers.

    The buffers must hold flows produced by `net` within the live autograd
    graph. Populates parameter gradients (global-norm clipped) and returns
    (loss terms, grads). Raises NonFiniteGradient with diagnostics when
    any gradient is not finite.
    """
    contrast = training_contrast_loss(buffers, margin)
    smooth = torch.stack([smoothness_loss(b) for b in buffers])
    loss = (contrast + SMOOTHNESS_WEIGHT * smooth).mean()
    net.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in net.named_parameters():
        if p.grad is not None:
            if not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            grads[name] = p.grad
    torch.nn.utils.clip_grad_norm_(net.parameters(), GRAD_CLIP_NORM)
    terms = {
        "contrast": float(contrast.mean().detach()),
        "smooth": float(smooth.mean().detach()),
        "total": float(loss.detach()),
    }
    return terms, grads


def adam_update(state: TrainState, grads: dict | None = None) -> TrainState:
    """Adam step on the shadow weights, then re-clamp to hardware ranges.

    If `grads` is given, it overrides the accumulated gradients first.
    """
    if grads is not None:
        for name, p in state.net.named_parameters():
            if name in grads:
                g = grads[name]
                p.grad = g if torch.is_tensor(g) else torch.as_tensor(g, dtype=p.dtype)
    state.optimizer.step()
    state.net.clamp_parameters()
    state.step += 1
    return state


@torch.no_grad()
def calibrate_thresholds(net: CornerVisionNet, windows: list[dict],
                         target_activity: float = 0.15, patch: int = 16):
    """Set each layer's threshold so a fresh network is moderately active.

    Runs the calibration windows through the network a few times and moves
    every threshold to the (1 - target) quantile of the observed membrane
    potentials, sweeping bottom-up so deeper layers see realistic input
    spike rates.
    """
    for li in range(len(net.layers)):
        state = net.zero_state(4)
        samples = []
        for wdict in windows:
            x = window_tensor([wdict], patch)
            _, _, _, state = net(x, state)
            u = state[li][0]
            samples.append(u.reshape(-1).clone())
        u_all = torch.cat(samples)
        pos = u_all[u_all > 0]
        if len(pos) == 0:
            continue
        theta = torch.quantile(pos, 1.0 - target_activity).item()
        net.layers[li].theta_n.fill_(float(np.clip(theta, 1.0, THETA_MAX)) / THETA_UNIT)
        net.layers[li].relaxed_scale.fill_(max(float(theta), 1.0))


# ---------------------------------------------------------------------------
# data plumbing

def encode_events_np(events: np.ndarray, patch: int = 16) -> np.ndarray:
    """Binary (2, patch, patch) occupancy tensor from an (N, 4) event array."""
    out = np.zeros((2, patch, patch), dtype=np.float64)
    if len(events):
        e = np.asarray(events)
        out[e[:, 3].astype(int), e[:, 1].astype(int), e[:, 0].astype(int)] = 1.0
    return out


def window_tensor(window_events: list[dict], patch: int = 16) -> torch.Tensor:
    """Stack a batch of per-corner event dicts into (B*4, 2, patch, patch)."""
    mats = []
    for wdict in window_events:
        for c in CORNER_NAMES:
            mats.append(encode_events_np(wdict[c], patch))
    return torch.as_tensor(np.stack(mats))


@dataclass
class TrainSettings:
    """Knobs of the self-supervised training run."""

    config: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        encoder_channels=(16, 32, 64), pooling_size=128))
    steps: int = 400
    batch: int = 16
    lr: float = 1e-4
    decode_lr: float = 1e-3
    seq_windows: int = 20
    n_sequences: int = 64
    val_sequences: int = 8
    flow_max: float = 1.5          # px/window, ds frame
    margin: int = 12
    eval_every: int = 50
    texture: TextureConfig = field(default_factory=TextureConfig)
    threads: int = 1
    distill: bool = True           # refit decode on contrast-extracted flows
    extract_steps: int = 120
    extract_lr: float = 0.05


def _make_dataset(rng: np.random.Generator, n: int, settings: TrainSettings):
    seqs = []
    for _ in range(n):
        angle = rng.uniform(0, 2 * math.pi)
        mag = rng.uniform(0.2, settings.flow_max)
        flow = mag * np.array([math.cos(angle), math.sin(angle)])
        windows, gt = generate_sequence(rng, settings.seq_windows, flow, settings.texture)
        seqs.append((windows, gt))
    return seqs


class VisionTrainer:
    """Drives quantized BPTT training over synthetic or recorded sequences."""

    def __init__(self, settings: TrainSettings = TrainSettings(), seed: int = 0,
                 sequences=None, val_sequences=None):
        torch.manual_seed(seed)
        torch.set_num_threads(settings.threads)
        self.settings = settings
        self.rng = np.random.default_rng(seed)
        self.net = CornerVisionNet(settings.config, seed=seed)
        self.state = make_train_state(self.net, lr=settings.lr)
        if settings.decode_lr != settings.lr:
            decode_params = [self.net.decode]
            others = [p for n, p in self.net.named_parameters() if n != "decode"]
            self.state.optimizer = torch.optim.Adam(
                [{"params": others, "lr": settings.lr},
                 {"params": decode_params, "lr": settings.decode_lr}],
                lr=settings.lr, betas=ADAM_BETAS, eps=ADAM_EPS,
            )
        self.train_seqs = sequences if sequences is not None else _make_dataset(
            self.rng, settings.n_sequences, settings)
        self.val_seqs = val_sequences if val_sequences is not None else _make_dataset(
            self.rng, settings.val_sequences, settings)
        calibrate_thresholds(
            self.net, self.train_seqs[0][0][: min(10, settings.seq_windows)],
            patch=settings.config.patch,
        )
        self._slot_seq = [None] * settings.batch
        self._slot_pos = [0] * settings.batch
        self._next_seq = 0
        self._state = None
        self.log_rows = []

    def _refill_slots(self):
        B = self.settings.batch
        if self._state is None:
            self._state = self.net.zero_state(B * 4)
        for b in range(B):
            if self._slot_seq[b] is None or self._slot_pos[b] >= self.settings.seq_windows:
                self._slot_seq[b] = self.train_seqs[self._next_seq % len(self.train_seqs)]
                self._next_seq += 1
                self._slot_pos[b] = 0
                for li in range(len(self._state)):
                    for t in self._state[li]:
                        t[b * 4:(b + 1) * 4] = 0.0

    def train_step(self) -> dict:
        """One buffer (5 windows) forward + BPTT + Adam update."""
        s = self.settings
        self._refill_slots()
        buffers = [EventFlowBuffer() for _ in range(s.batch)]
        for w in range(5):
            window_events = []
            t0s = []
            for b in range(s.batch):
                windows, _ = self._slot_seq[b]
                wi = self._slot_pos[b] + w
                window_events.append(windows[wi])
                t0s.append(wi * 5000)
            x = window_tensor(window_events, s.config.patch)
            flows, _, _, self._state = self.net(x, self._state)
            flows_pxw = (flows * WINDOW_MS).reshape(s.batch, 4, 2)
            for b in range(s.batch):
                buffers[b].append(
                    window_from_arrays(window_events[b], flows_pxw[b], t0s[b], t0s[b] + 5000)
                )
        terms, _ = bptt_step(self.net, buffers, margin=s.margin)
        adam_update(self.state)
        self._state = self.net.detach_state(self._state)
        for b in range(s.batch):
            self._slot_pos[b] += 5
        return terms

    @torch.no_grad()
    def validation_epe(self) -> float:
        """Mean corner-flow EPE (px/window) on held-out sequences."""
        s = self.settings
        preds, gts = [], []
        for windows, gt in self.val_seqs:
            state = self.net.zero_state(4)
            for wi, wdict in enumerate(windows):
                x = window_tensor([wdict], s.config.patch)
                flows, _, _, state = self.net(x, state)
                preds.append(flows.numpy() * WINDOW_MS)
                gts.append(gt[wi])
        return float(epe(np.stack(preds), np.stack(gts)))

    def distill_decode(self):
        """Self-supervised decode refit: fit the readout in closed form to
        flows extracted from the contrast objective itself.

        Stochastic descent on the decode is the slowest part of end-to-end
        training, while per-sequence direct optimization of the same
        objective recovers flows reliably; regressing the (quantized)
        pooling spikes onto those pseudo-flows therefore closes the loop
        without touching any ground truth. Sequences whose extraction
        barely improved on the zero-flow loss are downweighted.
        """
        s = self.settings
        flows, losses, zero_losses = extract_sequence_flows(
            self.train_seqs, steps=s.extract_steps, lr=s.extract_lr, margin=s.margin,
        )
        improve = np.clip(
            (zero_losses - losses) / np.maximum(zero_losses, 1e-9), 0.0, 1.0
        )
        weights = np.where(improve > 0.02, improve, 0.0)
        if weights.sum() == 0:
            logger.warning("decode distillation skipped: no sequence improved")
            return
        spikes = collect_pooling_spikes(self.net, self.train_seqs, s.config.patch)
        D = ridge_decode(spikes, flows, weights)
        with torch.no_grad():
            self.net.decode.copy_(torch.as_tensor(D, dtype=torch.float64))

    def run(self) -> list:
        """Full training loop; returns log rows (step, losses, epe)."""
        s = self.settings
        epe_val = self.validation_epe()
        terms = {"contrast": float("nan"), "smooth": float("nan"), "total": float("nan")}
        for _ in range(s.steps):
            terms = self.train_step()
            if self.state.step % s.eval_every == 0:
                epe_val = self.validation_epe()
            self.log_rows.append(
                (self.state.step, terms["contrast"], terms["smooth"], terms["total"], epe_val)
            )
        if s.distill:
            self.distill_decode()
            epe_val = self.validation_epe()
            self.log_rows.append(
                (self.state.step, terms["contrast"], terms["smooth"], terms["total"], epe_val)
            )
        return self.log_rows


# ---------------------------------------------------------------------------
# evaluation against pose-derived ground truth

def epe_stats(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Per-corner and aggregate endpoint error of (N, 4, 2) flow series."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    per_corner = {c: epe(pred[:, k], gt[:, k]) for k, c in enumerate(CORNER_NAMES)}
    return {"per_corner": per_corner, "mean": epe(pred, gt)}


def pose_gt_flows(poses: np.ndarray, t_us: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Ground-truth corner flows (ds px/window) at given times from poses.

    Velocity comes from central position differences, body rates from the
    relative quaternion between neighboring samples; the continuous
    homography of the interpolated state gives the corner flow field.
    """
    t_us = np.asarray(t_us, dtype=float)
    tp = poses[:, 0]
    out = np.empty((len(t_us), 4, 2))
    for i, t in enumerate(t_us):
        j = int(np.clip(np.searchsorted(tp, t) - 1, 0, len(tp) - 2))
        dt = (tp[j + 1] - tp[j]) * 1e-6
        v_w = (poses[j + 1, 1:4] - poses[j, 1:4]) / dt
        q0 = poses[j, 4:8]
        q1 = poses[j + 1, 4:8]
        q0c = q0 * np.array([1.0, -1, -1, -1])
        dq = quat_multiply(q0c[None], q1[None])[0]
        omega_b = (2.0 if dq[0] >= 0 else -2.0) * dq[1:] / dt
        frac = np.clip((t - tp[j]) / (tp[j + 1] - tp[j]), 0.0, 1.0)
        q = q0 + frac * (q1 - q0)
        q = q / np.linalg.norm(q)
        v_b = quat_rotate(q * np.array([1.0, -1, -1, -1]), v_w[None])[0]
        p = poses[j, 1:4] + frac * (poses[j + 1, 1:4] - poses[j, 1:4])
        pz_cam = p[2] + quat_rotate(q[None], cam.T_CB[None])[0][2]
        Hdot = continuous_homography(omega_b, v_b, max(pz_cam, 1e-3), cam)
        flows = corner_flows_from_Hdot(Hdot)
        out[i] = convert_corner_flows(flows, "ds_px_per_window", cam).flows
    return out


def evaluate_epe_files(net: snn.QuantizedCornerNet, events_path, poses_path,
                       cam: CameraModel | None = None):
    """Replay an event file through the integer engine and score against
    pose-derived ground-truth corner flows.

    Returns (stats, rows): rows carry one line per window with the window
    index, midpoint time, per-corner EPE, and the observable traces from
    both predicted and ground-truth flows.
    """
    from . import events as ev
    from .homography import observables_from_corner_flows, observables_to_body

    cam = cam or CameraModel()
    poses = ev.load_poses(poses_path)
    if len(poses) < 2:
        raise ValueError("pose file must hold at least two samples")
    preds = []
    mids = []
    net.reset(4)
    for window in ev.window_and_route(ev.load_events(events_path)):
        x = ev.encode_window(window)
        flows_pxms, _ = net.decode_step(x)
        preds.append(flows_pxms * WINDOW_MS)
        mids.append(0.5 * (window.t_start + window.t_end))
    if not preds:
        raise ValueError("event file holds no windows")
    preds = np.stack(preds)
    mids = np.asarray(mids)
    if mids[-1] > poses[-1, 0] + 1e4:
        raise ValueError("event stream extends past the pose file: unaligned inputs")
    gts = pose_gt_flows(poses, mids, cam)
    stats = epe_stats(preds, gts)

    rows = []
    for i in range(len(preds)):
        obs_p = observables_to_body(
            observables_from_corner_flows(CornerFlowSet(preds[i], "ds_px_per_window"), cam), cam
        )
        obs_g = observables_to_body(
            observables_from_corner_flows(CornerFlowSet(gts[i], "ds_px_per_window"), cam), cam
        )
        err = np.sqrt(((preds[i] - gts[i]) ** 2).sum(axis=1))
        rows.append(
            (i, mids[i] * 1e-6, *err, float(err.mean()),
             *obs_p.nu, obs_p.omega_z, *obs_g.nu, obs_g.omega_z)
        )
    return stats, rows


EVAL_TRACE_HEADER = [
    "window", "t", "epe_TL", "epe_TR", "epe_BR", "epe_BL", "epe_mean",
    "nu_hat_x", "nu_hat_y", "nu_hat_z", "omega_z_hat",
    "nu_gt_x", "nu_gt_y", "nu_gt_z", "omega_z_gt",
]

TRAIN_LOG_HEADER = ["step", "contrast_loss", "smooth_loss", "total", "epe_val"]


# ---------------------------------------------------------------------------
# pseudo-flow extraction and decode refit (self-supervised distillation)

def extract_sequence_flows(sequences, steps: int = 120, lr: float = 0.05,
                           retry_inits=((0.6, 0.0), (-0.6, 0.0), (0.0, 0.6), (0.0, -0.6)),
                           margin: int = 12):
    """Per-sequence flow estimates from the contrast objective alone.

    Optimizes one shared flow vector per constant-flow sequence against
    the multi-scale deblurring objective (no ground truth involved), with
    axis-aligned restarts for sequences whose zero-start stalls. Returns
    (flows (n, 2) in px/window, final losses, zero-flow losses).
    """
    n = len(sequences)

    def run(active, init):
        F = torch.tensor(np.tile(np.asarray(init, float), (len(active), 1)),
                         requires_grad=True)
        bufs = []
        for row, si in enumerate(active):
            windows = sequences[si][0]
            for b0 in range(0, len(windows), 5):
                buf = EventFlowBuffer()
                for wi in range(b0, b0 + 5):
                    buf.append(window_from_arrays(
                        windows[wi], F[row].expand(4, 2), wi * 5000, (wi + 1) * 5000))
                bufs.append(buf)
        owner = []
        for row, si in enumerate(active):
            owner.extend([row] * (len(sequences[si][0]) // 5))
        owner = np.asarray(owner)
        counts = np.bincount(owner, minlength=len(active))

        def per_seq_losses():
            with torch.no_grad():
                final = training_contrast_loss(bufs, margin).numpy()
            per_seq = np.zeros(len(active))
            for li, row in enumerate(owner):
                per_seq[row] += final[li]
            return per_seq / counts

        start = per_seq_losses()
        opt = torch.optim.Adam([F], lr=lr)
        for _ in range(steps):
            losses = training_contrast_loss(bufs, margin)
            opt.zero_grad()
            losses.mean().backward()
            opt.step()
        return F.detach().numpy(), per_seq_losses(), start

    all_idx = list(range(n))
    flows, losses, zero_losses = run(all_idx, (0.0, 0.0))
    # zero-start can stall on a plateau when the true displacement is large;
    # retry poorly improved sequences from axis-aligned starts
    with torch.no_grad():
        stalled = [si for si in all_idx if np.linalg.norm(flows[si]) < 0.15]
    if stalled:
        for init in retry_inits:
            f2, l2, _ = run(stalled, init)
            for row, si in enumerate(stalled):
                if l2[row] < losses[si]:
                    losses[si] = l2[row]
                    flows[si] = f2[row]
    return flows, losses, zero_losses


def collect_pooling_spikes(net: CornerVisionNet, sequences, patch: int = 16):
    """Quantized-forward pooling spikes per (sequence, window, corner)."""
    X = []
    with torch.no_grad():
        for windows, _ in sequences:
            state = net.zero_state(4)
            rows = []
            for wdict in windows:
                x = window_tensor([wdict], patch)
                _, pool, _, state = net(x, state)
                rows.append(pool.numpy())
            X.append(np.stack(rows))        # (n_windows, 4, P)
    return X


def ridge_decode(spikes: list, flows_pxw: np.ndarray, weights: np.ndarray | None = None,
                 lam: float = 1e-3) -> np.ndarray:
    """Closed-form weighted ridge fit of the 2xP decode matrix.

    `spikes` is the output of collect_pooling_spikes; `flows_pxw` one flow
    per sequence (px/window) used as that sequence's target for every
    window and corner; `weights` scales each sequence's contribution.
    """
    P = spikes[0].shape[-1]
    A = np.zeros((P, P))
    b = np.zeros((P, 2))
    for si, S in enumerate(spikes):
        X = S.reshape(-1, P)
        y = np.tile(flows_pxw[si] / WINDOW_MS, (X.shape[0], 1))
        w = 1.0 if weights is None else float(weights[si])
        A += w * (X.T @ X)
        b += w * (X.T @ y)
    W = np.linalg.solve(A + lam * np.eye(P), b)
    return W.T  # (2, P)


def sequences_from_file(path, seq_windows: int, patch: int = 16) -> list:
    """Cut a recorded event file into fixed-length training sequences.

    Ground-truth flows are unknown for recordings, so the per-window gt
    array is NaN (validation EPE is skipped for such sequences).
    """
    from . import events as ev

    windows = []
    for w in ev.window_and_route(ev.load_events(path)):
        wdict = {}
        for c, p in w.patches.items():
            wdict[c] = np.stack(
                [p.x.astype(float), p.y.astype(float), p.t.astype(float),
                 p.polarity.astype(float)], axis=1
            ) if len(p) else np.empty((0, 4))
        windows.append(wdict)
    seqs = []
    for start in range(0, len(windows) - seq_windows + 1, seq_windows):
        chunk = []
        for wi in range(start, start + seq_windows):
            shifted = {}
            for c, arr in windows[wi].items():
                arr = arr.copy()
                if len(arr):
                    arr[:, 2] -= start * 5000.0
                shifted[c] = arr
            chunk.append(shifted)
        gt = np.full((seq_windows, 4, 2), np.nan)
        seqs.append((chunk, gt))
    return seqs


def run_training(settings: TrainSettings, seed: int, out_dir,
                 events_path=None, resume=None):
    """Full training entry point used by the command line.

    Trains on synthetic translating-texture sequences (or on a recorded
    event file when given), writes the integer checkpoint with the float
    training payload and the training-log CSV, and returns their paths.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    sequences = None
    if events_path is not None:
        sequences = sequences_from_file(events_path, settings.seq_windows,
                                        settings.config.patch)
        if not sequences:
            raise ValueError(f"event file {events_path} holds no full sequence")
    trainer = VisionTrainer(settings, seed=seed, sequences=sequences)
    if resume is not None:
        net, doc = snn.load_checkpoint(resume)
        training = doc.get("training")
        if training is not None:
            trainer.net.load_training_payload(training["parameters"])
            trainer.state.step = int(training["step"])
        else:
            trainer.net.load_quantized(net)
    rows = trainer.run()
    ckpt_path = os.path.join(out_dir, "vision.ckpt.json")
    log_path = os.path.join(out_dir, "training_log.csv")
    save_trainer_checkpoint(ckpt_path, trainer)
    write_csv(log_path, TRAIN_LOG_HEADER, rows)
    return ckpt_path, log_path, rows


def save_trainer_checkpoint(path, trainer: VisionTrainer, meta: dict | None = None):
    """Integer checkpoint plus the float masters and step for resuming."""
    net = trainer.net.export_quantized()
    training = {"step": trainer.state.step, "parameters": trainer.net.training_payload()}
    snn.save_checkpoint(path, net, meta=meta or {}, training=training)
