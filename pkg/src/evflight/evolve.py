"""Mutation-only genetic algorithm for the 4x9 linear flight controller.

Controllers map [nu_hat (3), omega_z_hat, |roll|, |pitch|, setpoint (3)]
to [thrust offset, roll cmd, pitch cmd, yaw-rate cmd], clamped to [-1, 1].
Fitness is accumulated setpoint-tracking error over batched simulator
episodes with domain randomization: a per-repeat attitude bias shared by
the whole population, randomized initial conditions shared per
(setpoint, repeat), and per-tick Gaussian noise on the simulated corner
flows. Selection is (mu + lambda): parents and offspring are re-evaluated
together each generation and the best `population` survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .homography import CameraModel
from .quadsim import (
    CONTROL_SUBSTEPS,
    FLOW_NOISE_STD,
    QuadParams,
    QuadState,
    ground_truth_observables,
    hover_rotor_speed,
    low_level_control,
    out_of_bounds,
    quat_from_perturbation,
    quat_to_euler,
    rk4_step,
)
from .util import atomic_write_text

INPUT_ORDER = (
    "nu_x_hat", "nu_y_hat", "nu_z_hat", "omega_z_hat",
    "abs_roll", "abs_pitch", "sp_x", "sp_y", "sp_z",
)

CONTROLLER_FORMAT = "evflight-controller"


@dataclass
class LinearController:
    """Evolved 4x9 matrix from observables/attitude/setpoint to commands."""

    M: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        if self.M.shape != (4, 9):
            raise ValueError(f"controller matrix must be 4x9, got {self.M.shape}")
        if not np.all(np.isfinite(self.M)):
            raise ValueError("controller matrix must be finite")

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return controller_output(self.M, inputs)

    def save(self, path) -> None:
        doc = {
            "format": CONTROLLER_FORMAT,
            "input_order": list(INPUT_ORDER),
            "matrix_row_major": self.M.reshape(-1).tolist(),
        }
        atomic_write_text(path, json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "LinearController":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CONTROLLER_FORMAT:
            raise ValueError(f"not a {CONTROLLER_FORMAT} file")
        if tuple(doc["input_order"]) != INPUT_ORDER:
            raise ValueError("controller input order mismatch")
        return cls(np.asarray(doc["matrix_row_major"], dtype=float).reshape(4, 9))


def controller_output(M: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Clamped linear control law c = clip(M @ inputs, -1, 1).

    Broadcasts over leading batch dimensions of both arguments.
    """
    M = np.asarray(M, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    c = np.einsum("...ij,...j->...i", M, inputs)
    return np.clip(c, -1.0, 1.0)


def setpoint_suite() -> np.ndarray:
    """The 16 scaled-velocity setpoints: hover, three landing speeds, and
    horizontal flight in four directions at three speeds (no ascent)."""
    sps = [np.zeros(3)]
    for mag in (0.2, 0.5, 1.0):
        sps.append(np.array([0.0, 0.0, -mag]))
    for mag in (0.2, 0.5, 1.0):
        for axis in (0, 1):
            for sign in (1.0, -1.0):
                v = np.zeros(3)
                v[axis] = sign * mag
                sps.append(v)
    out = np.asarray(sps)
    assert out.shape == (16, 3)
    return out


@dataclass(frozen=True)
class EvolutionConfig:
    """Desk-scale defaults; the flight-scale run used population 100 and
    roughly 25k generations with ten repeats."""

    population: int = 20
    generations: int = 200
    mutation_std: float = float(np.sqrt(0.001))  # N(0, 0.001) variance
    mutation_decay: float = 1.0   # per-generation sigma decay (1.0 = constant)
    init_range: float = 0.1
    repeats: int = 2
    n_steps: int = 1000
    setpoints: np.ndarray = field(default_factory=setpoint_suite)
    w_z_hover: float = 10.0
    attitude_bias_range: float = 0.001
    noise_std: float = FLOW_NOISE_STD
    horizontal_altitude: float = 1.5
    freeze_randomization: bool = False

    def __post_init__(self):
        object.__setattr__(self, "setpoints", np.asarray(self.setpoints, dtype=float).reshape(-1, 3))
        if self.population < 1 or self.repeats < 1 or self.n_steps < 1:
            raise ValueError("population, repeats, and n_steps must be positive")


def _episode_initial_state(rng: np.random.Generator, setpoints: np.ndarray,
                           repeats: int, config: EvolutionConfig,
                           params: QuadParams) -> QuadState:
    """Randomized per-(setpoint, repeat) initial conditions, one episode
    per pair; horizontal setpoints start from the fixed altitude."""
    S = len(setpoints)
    n = S * repeats
    p = np.array([0.0, 0.0, 2.0]) + rng.uniform(-1.0, 1.0, size=(n, 3))
    horizontal = np.repeat(np.any(setpoints[:, :2] != 0.0, axis=1), repeats)
    p[horizontal, 2] = config.horizontal_altitude
    v = rng.uniform(-0.02, 0.02, size=(n, 3))
    q = quat_from_perturbation(rng.uniform(-0.02, 0.02, size=(n, 3)))
    omega = rng.uniform(-0.02, 0.02, size=(n, 3))
    rotor = np.full((n, 4), hover_rotor_speed(params))
    return QuadState(p=p, q=q, v=v, omega=omega, rotor=rotor)


def _tile_state(state: QuadState, times: int) -> QuadState:
    return QuadState(
        p=np.tile(state.p, (times, 1)),
        q=np.tile(state.q, (times, 1)),
        v=np.tile(state.v, (times, 1)),
        omega=np.tile(state.omega, (times, 1)),
        rotor=np.tile(state.rotor, (times, 1)),
    )


def generation_randomization(config: EvolutionConfig, seed: int, generation: int,
                             params: QuadParams | None = None):
    """Shared per-generation randomization: initial states for every
    (setpoint, repeat) pair, the per-repeat attitude bias, and the RNG that
    continues into per-tick flow noise. Identical for every individual of
    the generation, which keeps selection fair."""
    params = params or QuadParams()
    gen_key = 0 if config.freeze_randomization else generation
    rng = np.random.default_rng(np.random.SeedSequence((seed, gen_key)))
    base = _episode_initial_state(rng, config.setpoints, config.repeats, config, params)
    bias = rng.uniform(-config.attitude_bias_range, config.attitude_bias_range,
                       size=config.repeats)
    return base, bias, rng


def evaluate_fitness_batch(Ms: np.ndarray, config: EvolutionConfig, seed: int,
                           generation: int = 0,
                           cam: CameraModel | None = None,
                           params: QuadParams | None = None,
                           observable_override=None,
                           use_fast: bool | None = None) -> np.ndarray:
    """Fitness of a population, every episode integrated in one batch.

    Returns accumulated tracking error per individual, averaged over
    setpoints x repeats. Episodes that crash or leave the arena stop
    accumulating (no extra penalty). `observable_override(state, sp)` lets
    tests replace the simulated vision output. The flow noise is drawn
    once per (setpoint, repeat, tick) and shared by the whole population,
    so individuals compete on identical episodes.

    By default episodes run through the compiled fastsim kernel when numba
    is available; `use_fast=False` forces the vectorized numpy lane (the
    two implement the same dynamics and share the noise stream).
    """
    Ms = np.asarray(Ms, dtype=float).reshape(-1, 4, 9)
    cam = cam or CameraModel()
    params = params or QuadParams()
    B = Ms.shape[0]
    S = len(config.setpoints)
    R = config.repeats
    E = B * S * R

    base, bias, rng = generation_randomization(config, seed, generation, params)
    state = _tile_state(base, B)
    bias_e = np.tile(np.tile(bias, S), B)

    sp = np.tile(np.repeat(config.setpoints, R, axis=0), (B, 1))
    M_e = np.repeat(Ms, S * R, axis=0)

    w = np.ones((E, 3))
    w[:, 2] = np.where(sp[:, 2] == 0.0, config.w_z_hover, 1.0)

    noise = None
    if observable_override is None:
        noise = rng.normal(scale=config.noise_std, size=(config.n_steps, S * R, 4, 2))

    from . import fastsim

    if use_fast is None:
        use_fast = fastsim.HAVE_NUMBA
    if use_fast and fastsim.HAVE_NUMBA and observable_override is None:
        state0 = np.concatenate([state.p, state.q, state.v, state.omega, state.rotor], axis=1)
        consts = fastsim.pack_params(params, cam)
        sr_of_e = np.tile(np.arange(S * R), B)
        fitness = fastsim.rollout_fitness(
            state0, M_e, sp, w, bias_e, noise.reshape(config.n_steps, S * R, 8),
            sr_of_e, consts, config.n_steps, CONTROL_SUBSTEPS, 0.0025,
        )
        return fitness.reshape(B, S * R).mean(axis=1)

    fitness = np.zeros(E)
    alive = np.ones(E, dtype=bool)

    for step_i in range(config.n_steps):
        if observable_override is not None:
            obs_hat, nu_z_world = observable_override(state, sp)
        else:
            sample = ground_truth_observables(
                state, cam, params, noise=np.tile(noise[step_i], (B, 1, 1))
            )
            obs_hat, nu_z_world = sample.obs_body, sample.nu_z_world_true

        roll, pitch, _ = quat_to_euler(state.q)
        inputs = np.concatenate(
            [
                obs_hat,
                (np.abs(roll) + bias_e)[:, None],
                (np.abs(pitch) + bias_e)[:, None],
                sp,
            ],
            axis=1,
        )
        cmd = controller_output(M_e, inputs)

        err = sp - np.stack([obs_hat[:, 0], obs_hat[:, 1], nu_z_world], axis=1)
        step_cost = (w * err**2).sum(axis=1) + obs_hat[:, 3] ** 2
        fitness += np.where(alive, step_cost, 0.0)

        frozen = state.copy()
        omega_cmd = low_level_control(cmd, state, params)
        for _ in range(CONTROL_SUBSTEPS):
            state = rk4_step(state, omega_cmd, params)
        dead = ~alive
        if dead.any():
            for name in ("p", "q", "v", "omega", "rotor"):
                arr = getattr(state, name)
                arr[dead] = getattr(frozen, name)[dead]
        alive &= ~out_of_bounds(state, params)

    return fitness.reshape(B, S * R).mean(axis=1)


def evaluate_fitness(M: np.ndarray, config: EvolutionConfig, seed: int, **kw) -> float:
    """Fitness of a single controller matrix."""
    return float(evaluate_fitness_batch(np.asarray(M)[None], config, seed, **kw)[0])


def evolve(config: EvolutionConfig, seed: int,
           cam: CameraModel | None = None, params: QuadParams | None = None,
           progress=None):
    """Run the GA; returns (best LinearController, history rows).

    History rows are (generation, best_F, median_F) over the evaluated
    parents-plus-offspring union. The returned controller is the best
    individual of the final generation's evaluation.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7071)))
    pop = rng.uniform(-config.init_range, config.init_range,
                      size=(config.population, 4, 9))
    history = []
    best_matrix = pop[0].copy()
    best_f = np.inf
    sigma = config.mutation_std
    for gen in range(config.generations):
        offspring = pop + rng.normal(scale=sigma, size=pop.shape)
        sigma *= config.mutation_decay
        union = np.concatenate([pop, offspring], axis=0)
        F = evaluate_fitness_batch(union, config, seed, generation=gen,
                                   cam=cam, params=params)
        order = np.argsort(F, kind="stable")
        pop = union[order[: config.population]]
        best_f = float(F[order[0]])
        best_matrix = union[order[0]].copy()
        history.append((gen, best_f, float(np.median(F))))
        if progress is not None:
            progress(gen, best_f, float(np.median(F)))
    return LinearController(best_matrix), history


EVOLUTION_LOG_HEADER = ["generation", "best_F", "median_F"]
