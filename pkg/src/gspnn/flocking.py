"""Flocking: multi-agent consensus with a learned decentralized controller.

A team of point agents with double-integrator dynamics must agree on a
velocity while avoiding collisions. A centralized expert (velocity consensus
plus a short-range repulsive potential) generates training trajectories; a
time-varying graph network is trained by imitation to reproduce its actions
from one-hop-computable features, then rolled out closed loop where each
agent acts only on delayed neighborhood information.

The communication graph links agents within ``comm_radius`` and changes
every step; its shift operator is the degree-normalized adjacency with zero
rows for agents that drift out of range, keeping the spectrum in [-1, 1]
uniformly in team size (what lets one trained controller run at any N).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graphs import Graph, GraphSignal, ShiftOperator
from .neural import (
    LayerSpec,
    ModelSpec,
    ModelState,
    ReadoutSpec,
    forward_batch,
    init_state,
    load_checkpoint,
    model_backward,
    save_checkpoint,
)
from .optim import LossSpec, Problem, TrainConfig, loss_eval, train

DATASET_FORMAT_VERSION = 1

# architecture: one delayed filter bank into a per-node readout
POLICY_FEATURES = 32
POLICY_ORDER = 3
POLICY_EPOCHS = 40
POLICY_BATCH_TRAJ = 20
POLICY_LEARNING_RATE = 5e-4

ZS_CACHE_BYTES = 300_000_000


class ExpertAbort(RuntimeError):
    """Agents collided (or coincide) and the expert controller gave up."""


@dataclass(frozen=True)
class FlockConfig:
    n_agents: int = 25
    duration: float = 2.0
    dt: float = 0.01
    comm_radius: float = 2.0
    u_max: float = 10.0
    disc_radius_scale: float = 0.6   # initial disc radius = scale * sqrt(N)
    min_spawn_distance: float = 0.1
    speed_range: float = 3.0         # initial velocities uniform in +-range

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class SwarmState:
    positions: np.ndarray    # (N, 2) meters
    velocities: np.ndarray   # (N, 2) m/s
    accelerations: np.ndarray  # (N, 2) m/s^2, the last applied actions
    time_index: int
    dt: float

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]


def step_dynamics(state: SwarmState, actions: np.ndarray,
                  u_max: float) -> SwarmState:
    """Saturated double-integrator step."""
    if not np.all(np.isfinite(actions)):
        raise ExpertAbort("non-finite actions")
    u = np.clip(actions, -u_max, u_max)
    dt = state.dt
    r = state.positions + state.velocities * dt + 0.5 * u * dt * dt
    v = state.velocities + u * dt
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
        raise ExpertAbort("non-finite state")
    return SwarmState(r, v, u, state.time_index + 1, dt)


# ---------------------------------------------------------------------------
# Geometry, communication graph, features. The array helpers are the hot
# path; the Graph/ShiftOperator wrappers expose the same construction.
# ---------------------------------------------------------------------------

def _pairwise(positions: np.ndarray):
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return diff, dist


def _adjacency_mask(dist: np.ndarray, radius: float) -> np.ndarray:
    mask = dist <= radius
    np.fill_diagonal(mask, False)
    return mask


def _normalized_shift_dense(mask: np.ndarray) -> np.ndarray:
    deg = mask.sum(axis=1).astype(float)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    return inv_sqrt[:, None] * mask * inv_sqrt[None, :]


def comm_graph(state: SwarmState, radius: float):
    """Communication graph and its degree-normalized shift operator."""
    if state.n_agents < 2:
        raise ValueError("need at least two agents")
    _, dist = _pairwise(state.positions)
    mask = _adjacency_mask(dist, radius)
    edges = []
    for i in range(state.n_agents):
        for j in range(i + 1, state.n_agents):
            if mask[i, j]:
                edges.append((i, j, 1.0))
    graph = Graph(state.n_agents, tuple(edges))
    shift = ShiftOperator.from_dense(_normalized_shift_dense(mask),
                                     kind="degree_normalized_adjacency",
                                     validate=False)
    return graph, shift


def _features_raw(positions: np.ndarray, velocities: np.ndarray,
                  mask: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Per-agent 6-vector from one-hop quantities only.

    Blocks: neighborhood velocity disagreement, and position offsets scaled
    by 1/d^4 and 1/d^2 (the collision-potential directions at two ranges).
    """
    n = positions.shape[0]
    if np.any(dist[mask] < 1e-6):
        raise ExpertAbort("zero-distance neighbor")
    deg = mask.sum(axis=1).astype(float)
    vel_sum = deg[:, None] * velocities - mask @ velocities
    feats = np.empty((n, 6))
    feats[:, 0:2] = vel_sum
    for col, power in ((2, 4.0), (4, 2.0)):
        w = np.zeros_like(dist)
        np.divide(mask.astype(float), dist ** power, out=w, where=mask)
        feats[:, col:col + 2] = w.sum(axis=1)[:, None] * positions - w @ positions
    return feats


def agent_features(state: SwarmState, radius: float) -> GraphSignal:
    """Decentralized input features (6 per agent) for the current graph."""
    _, dist = _pairwise(state.positions)
    mask = _adjacency_mask(dist, radius)
    return GraphSignal(_features_raw(state.positions, state.velocities,
                                     mask, dist))


# ---------------------------------------------------------------------------
# Expert controller: global velocity consensus + repulsive potential
# ---------------------------------------------------------------------------

def _potential_slope_over_d(dist: np.ndarray, radius: float) -> np.ndarray:
    """-U'(d)/d for the repulsion U(d) = d^-2 cosine-tapered to zero on
    [0.9 R, R]; entries beyond R (and the diagonal) are zero."""
    lo = 0.9 * radius
    out = np.zeros_like(dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        core = dist < lo
        out[core] = 2.0 / dist[core] ** 4
        band = (dist >= lo) & (dist < radius)
        d = dist[band]
        phase = np.pi * (d - lo) / (radius - lo)
        w = 0.5 * (1.0 + np.cos(phase))
        dw = -0.5 * np.pi / (radius - lo) * np.sin(phase)
        # U = d^-2 w(d): -U'/d = (2 w / d^3 - dw / d^2) / d
        out[band] = (2.0 * w / d ** 3 - dw / d ** 2) / d
    np.fill_diagonal(out, 0.0)
    return out


def expert_action(state: SwarmState, radius: float = 2.0) -> np.ndarray:
    """Centralized actions: full-team velocity consensus plus collision
    avoidance; aborts if any two agents (numerically) coincide."""
    if state.n_agents < 2:
        raise ValueError("need at least two agents")
    _, dist = _pairwise(state.positions)
    off_diag = ~np.eye(state.n_agents, dtype=bool)
    if np.min(dist[off_diag]) < 1e-6:
        raise ExpertAbort("coincident agents")
    n = state.n_agents
    consensus = -(n * state.velocities - state.velocities.sum(axis=0))
    w = _potential_slope_over_d(dist, radius)
    repulsion = w.sum(axis=1)[:, None] * state.positions - w @ state.positions
    return consensus + repulsion


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectorySample:
    positions: np.ndarray    # (T+1, N, 2)
    velocities: np.ndarray   # (T+1, N, 2)
    actions: np.ndarray      # (T, N, 2), executed (saturated) expert actions
    features: np.ndarray     # (T, N, 6) raw features at each acted step
    seed: int
    config: FlockConfig
    _zs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    def shift_dense(self, t: int) -> np.ndarray:
        _, dist = _pairwise(self.positions[t])
        mask = _adjacency_mask(dist, self.config.comm_radius)
        return _normalized_shift_dense(mask)

    def delayed_stacks(self, order: int) -> np.ndarray:
        """(T, order+1, N, 6) chained-shift feature stacks, cached."""
        if self._zs is not None and self._zs.shape[1] == order + 1:
            return self._zs
        t_steps, n = self.n_steps, self.n_agents
        zs = np.zeros((t_steps, order + 1, n, 6))
        for t in range(t_steps):
            zs[t, 0] = self.features[t]
            if t == 0:
                continue
            s_t = self.shift_dense(t)
            for k in range(1, order + 1):
                zs[t, k] = s_t @ zs[t - 1, k - 1]
        self._zs = zs
        return zs


def _mask_connected(mask: np.ndarray) -> bool:
    n = mask.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = [0]
    while frontier:
        nxt = np.nonzero(mask[frontier].any(axis=0) & ~seen)[0]
        seen[nxt] = True
        frontier = nxt.tolist()
    return bool(seen.all())


def spawn_state(config: FlockConfig, rng: np.random.Generator) -> SwarmState:
    """Positions uniform in a density-constant disc with a minimum spacing
    and an initially connected communication graph; velocities uniform in
    the configured square."""
    n = config.n_agents
    radius = config.disc_radius_scale * np.sqrt(n)
    for _ in range(200):
        positions = np.zeros((n, 2))
        placed = True
        for i in range(n):
            for _ in range(1000):
                r = radius * np.sqrt(rng.uniform())
                theta = rng.uniform(0.0, 2.0 * np.pi)
                p = np.array([r * np.cos(theta), r * np.sin(theta)])
                if i == 0 or np.min(np.linalg.norm(positions[:i] - p, axis=1)) \
                        >= config.min_spawn_distance:
                    positions[i] = p
                    break
            else:
                placed = False
                break
        if not placed:
            continue
        _, dist = _pairwise(positions)
        if _mask_connected(_adjacency_mask(dist, config.comm_radius)):
            break
    else:
        raise ExpertAbort("could not spawn a connected, spaced-out team")
    velocities = rng.uniform(-config.speed_range, config.speed_range,
                             size=(n, 2))
    return SwarmState(positions, velocities, np.zeros((n, 2)), 0, config.dt)


def run_expert_trajectory(config: FlockConfig, seed: int) -> TrajectorySample:
    rng = np.random.default_rng(seed)
    state = spawn_state(config, rng)
    t_steps = config.n_steps
    n = config.n_agents
    positions = np.zeros((t_steps + 1, n, 2))
    velocities = np.zeros((t_steps + 1, n, 2))
    actions = np.zeros((t_steps, n, 2))
    features = np.zeros((t_steps, n, 6))
    for t in range(t_steps):
        positions[t] = state.positions
        velocities[t] = state.velocities
        _, dist = _pairwise(state.positions)
        mask = _adjacency_mask(dist, config.comm_radius)
        features[t] = _features_raw(state.positions, state.velocities,
                                    mask, dist)
        raw = expert_action(state, config.comm_radius)
        state = step_dynamics(state, raw, config.u_max)
        actions[t] = state.accelerations
    positions[t_steps] = state.positions
    velocities[t_steps] = state.velocities
    return TrajectorySample(positions, velocities, actions, features, seed,
                            config)


def generate_dataset(n_traj: int, config: FlockConfig, seed: int):
    """Expert trajectories; aborted spawns/rollouts are resampled with the
    next seed and counted. Returns (samples, n_resampled)."""
    samples = []
    n_resampled = 0
    next_seed = seed
    while len(samples) < n_traj:
        try:
            samples.append(run_expert_trajectory(config, next_seed))
        except ExpertAbort:
            n_resampled += 1
            if n_resampled > 50 * max(n_traj, 1):
                raise
        next_seed += 1
    return samples, n_resampled


def velocity_variation_cost(velocities: np.ndarray) -> float:
    """(1/N) sum_t sum_i ||v_i(t) - mean_j v_j(t)||^2 over the acted steps."""
    v = velocities[:-1]
    centered = v - v.mean(axis=1, keepdims=True)
    return float(np.sum(centered * centered) / v.shape[1])


# ---------------------------------------------------------------------------
# Dataset persistence: one directory, plain .npy arrays plus a manifest
# ---------------------------------------------------------------------------

def save_dataset(directory, samples: list[TrajectorySample],
                 n_resampled: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("refusing to save an empty dataset")
    cfg = samples[0].config
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "n_trajectories": len(samples),
        "n_agents": cfg.n_agents,
        "duration": cfg.duration,
        "dt": cfg.dt,
        "comm_radius": cfg.comm_radius,
        "u_max": cfg.u_max,
        "disc_radius_scale": cfg.disc_radius_scale,
        "min_spawn_distance": cfg.min_spawn_distance,
        "speed_range": cfg.speed_range,
        "seeds": [s.seed for s in samples],
        "n_resampled": n_resampled,
        "files": [],
    }
    for idx, sample in enumerate(samples):
        stem = f"traj_{idx:04d}"
        for name, arr in (("positions", sample.positions),
                          ("velocities", sample.velocities),
                          ("actions", sample.actions)):
            fname = f"{stem}.{name}.npy"
            np.save(directory / fname, arr)
            manifest["files"].append(fname)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> list[TrajectorySample]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError("unsupported dataset format version")
    cfg = FlockConfig(
        n_agents=manifest["n_agents"], duration=manifest["duration"],
        dt=manifest["dt"], comm_radius=manifest["comm_radius"],
        u_max=manifest["u_max"],
        disc_radius_scale=manifest["disc_radius_scale"],
        min_spawn_distance=manifest["min_spawn_distance"],
        speed_range=manifest["speed_range"])
    samples = []
    for idx, seed in enumerate(manifest["seeds"]):
        stem = f"traj_{idx:04d}"
        positions = np.load(directory / f"{stem}.positions.npy")
        velocities = np.load(directory / f"{stem}.velocities.npy")
        actions = np.load(directory / f"{stem}.actions.npy")
        features = np.zeros((actions.shape[0], cfg.n_agents, 6))
        for t in range(actions.shape[0]):
            _, dist = _pairwise(positions[t])
            mask = _adjacency_mask(dist, cfg.comm_radius)
            features[t] = _features_raw(positions[t], velocities[t], mask, dist)
        samples.append(TrajectorySample(positions, velocities, actions,
                                        features, seed, cfg))
    return samples


# ---------------------------------------------------------------------------
# Policy: delayed filter bank + per-node readout, trained by imitation
# ---------------------------------------------------------------------------

@dataclass
class PolicyBundle:
    spec: ModelSpec
    state: ModelState
    action_scale: float         # predictions are in units of u_max
    config: FlockConfig


def build_policy_spec(nonlinearity: str = "tanh") -> ModelSpec:
    layer = LayerSpec("fir", 6, POLICY_FEATURES, POLICY_ORDER,
                      nonlinearity=nonlinearity)
    return ModelSpec((layer,), ReadoutSpec("per_node_linear", 2),
                     shift_mode="time_varying")


class ImitationProblem(Problem):
    """MSE between the policy's per-node readout and the expert's actions
    (normalized by u_max), over every agent and step of a trajectory batch."""

    def __init__(self, spec: ModelSpec, state: ModelState,
                 samples: list[TrajectorySample], u_max: float):
        self.spec = spec
        self.state = state
        self.samples = samples
        self.u_max = u_max
        self.order = spec.layers[0].order
        self.loss = LossSpec("mse")
        total = sum(s.features.size * (self.order + 1) for s in samples)
        self.cache_stacks = total * 8 <= ZS_CACHE_BYTES

    def n_samples(self) -> int:
        return len(self.samples)

    def batch_loss(self, indices):
        zs_list, targets = [], []
        for idx in indices:
            sample = self.samples[idx]
            zs = sample.delayed_stacks(self.order)
            if not self.cache_stacks:
                sample._zs = None
            zs_list.append(zs)
            targets.append(sample.actions / self.u_max)
        zs_all = np.concatenate(zs_list)            # (B*T, K+1, N, 6)
        target = np.concatenate(targets)            # (B*T, N, 2)
        first_layer_zs = zs_all.transpose(1, 0, 2, 3)
        out, tape = forward_batch(self.spec, self.state, None,
                                  first_layer_zs[0],
                                  first_layer_zs=first_layer_zs)
        value, dpred = loss_eval(self.loss, out, target)
        grads = model_backward(tape, self.spec, self.state, dpred)
        return value, grads


def train_policy(samples: list[TrajectorySample], seed: int,
                 nonlinearity: str = "tanh",
                 epochs: int = POLICY_EPOCHS,
                 batch_trajectories: int = POLICY_BATCH_TRAJ,
                 learning_rate: float = POLICY_LEARNING_RATE):
    if not samples:
        raise ValueError("empty dataset")
    config = samples[0].config
    spec = build_policy_spec(nonlinearity)
    state = init_state(spec, np.random.default_rng(seed))
    problem = ImitationProblem(spec, state, samples, config.u_max)
    history = train(problem, TrainConfig(
        epochs=epochs, batch_size=batch_trajectories,
        learning_rate=learning_rate, seed=seed))
    return PolicyBundle(spec, state, config.u_max, config), history


# ---------------------------------------------------------------------------
# Closed-loop rollout
# ---------------------------------------------------------------------------

class _PolicyRunner:
    """Incremental delayed-stack evaluation: at each step the chain states
    advance by one fresh shift application, matching the full delayed filter
    on complete histories."""

    def __init__(self, bundle: PolicyBundle, n_agents: int):
        self.bundle = bundle
        order = bundle.spec.layers[0].order
        self.zs = np.zeros((order + 1, n_agents, 6))

    def act(self, shift_dense: np.ndarray, features: np.ndarray) -> np.ndarray:
        zs = self.zs
        for k in range(zs.shape[0] - 1, 0, -1):
            zs[k] = shift_dense @ zs[k - 1]
        zs[0] = features
        out, _ = forward_batch(self.bundle.spec, self.bundle.state, None,
                               zs[0][None], first_layer_zs=zs[:, None])
        return out[0] * self.bundle.action_scale


def rollout_policy(bundle: PolicyBundle, n_agents: int, seed: int,
                   duration: float | None = None):
    """Closed-loop run; returns (trajectory arrays, cost, diverged flag)."""
    config = replace(bundle.config, n_agents=n_agents,
                     duration=duration or bundle.config.duration)
    rng = np.random.default_rng(seed)
    state = spawn_state(config, rng)
    t_steps = config.n_steps
    positions = np.zeros((t_steps + 1, n_agents, 2))
    velocities = np.zeros((t_steps + 1, n_agents, 2))
    runner = _PolicyRunner(bundle, n_agents)
    for t in range(t_steps):
        positions[t] = state.positions
        velocities[t] = state.velocities
        _, dist = _pairwise(state.positions)
        mask = _adjacency_mask(dist, config.comm_radius)
        try:
            feats = _features_raw(state.positions, state.velocities, mask, dist)
            actions = runner.act(_normalized_shift_dense(mask), feats)
            state = step_dynamics(state, actions, config.u_max)
        except ExpertAbort:
            return (positions, velocities), float("inf"), True
        if not np.all(np.isfinite(state.positions)):
            return (positions, velocities), float("inf"), True
    positions[t_steps] = state.positions
    velocities[t_steps] = state.velocities
    return (positions, velocities), velocity_variation_cost(velocities), False


def expert_rollout_cost(config: FlockConfig, seed: int) -> float:
    return velocity_variation_cost(run_expert_trajectory(config, seed).velocities)


def zero_controller_cost(config: FlockConfig, seed: int) -> float:
    """Cost when nobody accelerates: the initial spread, every step."""
    rng = np.random.default_rng(seed)
    state = spawn_state(config, rng)
    centered = state.velocities - state.velocities.mean(axis=0)
    return float(config.n_steps * np.sum(centered * centered) / config.n_agents)


def scalability_sweep(bundle: PolicyBundle, sizes: list[int], trials: int,
                      base_seed: int = 10_000):
    """Mean/std closed-loop cost per team size, parameters untouched."""
    rows = []
    for size in sizes:
        costs = []
        for trial in range(trials):
            _, cost, _ = rollout_policy(bundle, size, base_seed + trial)
            costs.append(cost)
        costs = np.array(costs)
        rows.append({"n_agents": size, "mean_cost": float(np.mean(costs)),
                     "std_cost": float(np.std(costs))})
    return rows


def save_policy(path, bundle: PolicyBundle, extra: dict | None = None) -> None:
    meta = {
        "experiment": "flocking",
        "action_scale": bundle.action_scale,
        "config": {
            "n_agents": bundle.config.n_agents,
            "duration": bundle.config.duration,
            "dt": bundle.config.dt,
            "comm_radius": bundle.config.comm_radius,
            "u_max": bundle.config.u_max,
            "disc_radius_scale": bundle.config.disc_radius_scale,
            "min_spawn_distance": bundle.config.min_spawn_distance,
            "speed_range": bundle.config.speed_range,
        },
    }
    meta.update(extra or {})
    save_checkpoint(path, bundle.spec, bundle.state, metadata=meta)


def load_policy(path) -> PolicyBundle:
    spec, state, meta = load_checkpoint(path)
    cfg = meta["config"]
    config = FlockConfig(
        n_agents=cfg["n_agents"], duration=cfg["duration"], dt=cfg["dt"],
        comm_radius=cfg["comm_radius"], u_max=cfg["u_max"],
        disc_radius_scale=cfg["disc_radius_scale"],
        min_spawn_distance=cfg["min_spawn_distance"],
        speed_range=cfg["speed_range"])
    return PolicyBundle(spec, state, meta["action_scale"], config)
