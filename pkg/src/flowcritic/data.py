"""Synthetic environments, datasets, and their file formats.

Two data sources drive everything downstream: a one-dimensional two-cluster
bandit whose true action-value function is known in closed form, and a
two-dimensional four-mode Gaussian mixture with a constant conditioning
state. Both come with exact oracles so learned quantities can be scored
against ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ACTION_LOW = -1.0
ACTION_HIGH = 1.0

BANDIT_STATE = np.array([0.0])
BANDIT_REWARD_STD = 0.1
BANDIT_CLUSTER_CENTERS = (0.5, -0.3)
BANDIT_CLUSTER_WEIGHTS = (0.8, 0.2)
BANDIT_CLUSTER_STD = 0.1

GMM_STATE = np.array([0.5, -0.5, 0.5, -0.5])
GMM_MEANS = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
GMM_VAR = 0.008


class DatasetFormatError(ValueError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class OfflineDataset:
    """Column-major transition store with an optional log-density column."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    log_density: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.log_density is not None and len(self.log_density) != n:
            raise ValueError("log_density column length mismatch")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            state=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_state=self.next_states[i],
            terminal=bool(self.terminals[i]),
        )


# -- bandit ------------------------------------------------------------------


def bandit_true_q(a) -> np.ndarray:
    """Closed-form action value: a tall narrow peak at -0.5 and a broad
    lower peak at +0.5."""
    a = np.asarray(a, dtype=np.float64)
    return 25.0 * np.exp(-25.0 * (a + 0.5) ** 2 / 2.0) + 10.0 * np.exp(-2.0 * (a - 0.5) ** 2)


def bandit_reward(a, rng: np.random.Generator) -> np.ndarray:
    """Noisy reward: true value plus N(0, 0.1^2), action clamped to the box."""
    a = np.clip(np.asarray(a, dtype=np.float64), ACTION_LOW, ACTION_HIGH)
    return bandit_true_q(a) + rng.normal(0.0, BANDIT_REWARD_STD, size=a.shape)


class BanditEnv:
    """Single-step environment over the action interval [-1, 1] with one
    constant (dummy) state."""

    state_dim = 1
    action_dim = 1

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def reset(self) -> np.ndarray:
        return BANDIT_STATE.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise ValueError(f"bandit action must be a single scalar, got shape {a.shape}")
        r = float(bandit_reward(a, self.rng)[0])
        return BANDIT_STATE.copy(), r, True


def make_bandit_dataset(n: int, rng: np.random.Generator) -> OfflineDataset:
    """Behavior data: 80% of actions near +0.5, 20% near -0.3, both with
    sampling std 0.1, clamped to the action box."""
    n_high = int(round(n * BANDIT_CLUSTER_WEIGHTS[0]))
    centers = np.empty(n)
    centers[:n_high] = BANDIT_CLUSTER_CENTERS[0]
    centers[n_high:] = BANDIT_CLUSTER_CENTERS[1]
    actions = centers + rng.normal(0.0, BANDIT_CLUSTER_STD, size=n)
    actions = np.clip(actions, ACTION_LOW, ACTION_HIGH)
    perm = rng.permutation(n)
    actions = actions[perm]
    rewards = bandit_reward(actions, rng)
    states = np.broadcast_to(BANDIT_STATE, (n, 1)).copy()
    return OfflineDataset(
        states=states,
        actions=actions.reshape(n, 1),
        rewards=rewards,
        next_states=states.copy(),
        terminals=np.ones(n, dtype=bool),
        metadata={
            "source": "bandit",
            "cluster_centers": list(BANDIT_CLUSTER_CENTERS),
            "cluster_weights": list(BANDIT_CLUSTER_WEIGHTS),
            "cluster_std": BANDIT_CLUSTER_STD,
        },
    )


def bandit_behavior_logpdf(a) -> np.ndarray:
    """Log-density of the (unclamped) behavior mixture, for test oracles."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    for w, c in zip(BANDIT_CLUSTER_WEIGHTS, BANDIT_CLUSTER_CENTERS):
        out = out + w * np.exp(-0.5 * ((a - c) / BANDIT_CLUSTER_STD) ** 2) / (
            BANDIT_CLUSTER_STD * np.sqrt(2.0 * np.pi)
        )
    return np.log(out)


# -- four-mode mixture --------------------------------------------------------


def make_gmm2d_dataset(n: int, rng: np.random.Generator) -> OfflineDataset:
    """Actions drawn from an equal-weight mixture of four isotropic
    Gaussians at (+-0.5, +-0.5) with variance 0.008; the conditioning state
    is the same constant vector for every row."""
    comp = rng.integers(0, 4, size=n)
    actions = GMM_MEANS[comp] + rng.normal(0.0, np.sqrt(GMM_VAR), size=(n, 2))
    states = np.broadcast_to(GMM_STATE, (n, 4)).copy()
    return OfflineDataset(
        states=states,
        actions=actions,
        rewards=np.zeros(n),
        next_states=states.copy(),
        terminals=np.ones(n, dtype=bool),
        metadata={"source": "gmm2d", "component_variance": GMM_VAR},
    )


def gmm_true_logpdf(a) -> np.ndarray:
    """Exact log-density of the four-mode mixture, vectorized over rows."""
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    pts = a.reshape(-1, 2)
    d2 = ((pts[:, None, :] - GMM_MEANS[None, :, :]) ** 2).sum(axis=2)
    comp_log = -0.5 * d2 / GMM_VAR - np.log(2.0 * np.pi * GMM_VAR)
    m = comp_log.max(axis=1, keepdims=True)
    out = np.log(np.exp(comp_log - m).mean(axis=1)) + m[:, 0]
    return out[0] if single else out


# -- file formats --------------------------------------------------------------

_MAGIC = b"FCDS"
_BINARY_VERSION = 1


def dataset_save(dataset: OfflineDataset, path: str) -> None:
    """Write the self-describing binary container (or JSON lines when the
    path ends in .jsonl)."""
    if path.endswith(".jsonl"):
        _save_jsonl(dataset, path)
        return
    n = len(dataset)
    meta = json.dumps(dataset.metadata).encode("utf-8")
    has_density = dataset.log_density is not None
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _BINARY_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<QIIB", n, dataset.state_dim, dataset.action_dim, int(has_density)))
        for arr in (dataset.states, dataset.actions, dataset.rewards, dataset.next_states):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.terminals, dtype=np.uint8).tobytes())
        if has_density:
            f.write(np.ascontiguousarray(dataset.log_density, dtype="<f8").tobytes())


def dataset_load(path: str) -> OfflineDataset:
    if path.endswith(".jsonl"):
        return _load_jsonl(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _BINARY_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    try:
        metadata = json.loads(raw[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: corrupted metadata block") from e
    off += meta_len
    n, d_s, d_a, has_density = struct.unpack_from("<QIIB", raw, off)
    off += struct.calcsize("<QIIB")
    expected = 8 * (n * d_s + n * d_a + n + n * d_s) + n + (8 * n if has_density else 0)
    if len(raw) - off != expected:
        raise DatasetFormatError(f"{path}: truncated payload ({len(raw) - off} bytes, expected {expected})")

    def take_f8(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return arr.astype(np.float64)

    states = take_f8(n * d_s, (n, d_s))
    actions = take_f8(n * d_a, (n, d_a))
    rewards = take_f8(n, (n,))
    next_states = take_f8(n * d_s, (n, d_s))
    terminals = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(bool)
    off += n
    log_density = take_f8(n, (n,)) if has_density else None
    return OfflineDataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        terminals=terminals,
        log_density=log_density,
        metadata=metadata,
    )


def _save_jsonl(dataset: OfflineDataset, path: str) -> None:
    header = {
        "kind": "flowcritic.dataset",
        "version": _BINARY_VERSION,
        "n": len(dataset),
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "has_log_density": dataset.log_density is not None,
        "metadata": dataset.metadata,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            rec = {
                "s": dataset.states[i].tolist(),
                "a": dataset.actions[i].tolist(),
                "r": float(dataset.rewards[i]),
                "s2": dataset.next_states[i].tolist(),
                "done": bool(dataset.terminals[i]),
            }
            if dataset.log_density is not None:
                rec["logd"] = float(dataset.log_density[i])
            f.write(json.dumps(rec) + "\n")


def _load_jsonl(path: str) -> OfflineDataset:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: corrupted header line") from e
    if header.get("kind") != "flowcritic.dataset":
        raise DatasetFormatError(f"{path}: not a dataset file")
    if header.get("version") != _BINARY_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {header.get('version')!r}")
    n = header["n"]
    if len(lines) - 1 != n:
        raise DatasetFormatError(f"{path}: header promises {n} records, found {len(lines) - 1}")
    records = [json.loads(line) for line in lines[1:]]
    states = np.array([r["s"] for r in records], dtype=np.float64)
    actions = np.array([r["a"] for r in records], dtype=np.float64)
    log_density = None
    if header.get("has_log_density"):
        log_density = np.array([r["logd"] for r in records], dtype=np.float64)
    return OfflineDataset(
        states=states.reshape(n, header["state_dim"]),
        actions=actions.reshape(n, header["action_dim"]),
        rewards=np.array([r["r"] for r in records], dtype=np.float64),
        next_states=np.array([r["s2"] for r in records], dtype=np.float64).reshape(n, header["state_dim"]),
        terminals=np.array([r["done"] for r in records], dtype=bool),
        log_density=log_density,
        metadata=header.get("metadata", {}),
    )
