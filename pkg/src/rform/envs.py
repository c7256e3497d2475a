"""Desk-scale environments, behavior policies, and the on-disk transition format.

Both environments have analytically known structure so tests can pin values: the
bandit's Q equals its reward field, and the line world's optimal return is a
short hand computation. Dataset files use the RFDS layout described at the
bottom; all floats are 64-bit little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, PreconditionError

_BOX_TOL = 1e-12


def _check_action(a: np.ndarray, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (dim,):
        raise ContractError(f"action must have {dim} coordinates, got shape {a.shape}")
    if np.abs(a).max() > 1.0 + _BOX_TOL:
        raise ContractError(f"action outside [-1, 1]^{dim}: {a}")
    return a


class TwoCornerBandit:
    """One-shot environment whose reward has two equal peaks in opposite corners.

    r(a) = max over the two corners of exp(-||a - c||^2 / sigma^2). The state is
    a constant placeholder so the networks keep their usual (s, a) signature.
    """

    name = "two-corner-bandit"
    state_dim = 2
    action_dim = 2
    horizon = 1
    corners = (np.array([-0.8, -0.8]), np.array([0.8, 0.8]))
    sigma = 0.35

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(2)

    def reward(self, a: np.ndarray) -> float:
        c1, c2 = self.corners
        s2 = self.sigma**2
        r1 = np.exp(-float(np.sum((a - c1) ** 2)) / s2)
        r2 = np.exp(-float(np.sum((a - c2) ** 2)) / s2)
        return max(r1, r2)

    def step(self, s: np.ndarray, a) -> tuple[np.ndarray, float, bool]:
        a = _check_action(a, self.action_dim)
        return np.zeros(2), self.reward(a), True


class LineWorld:
    """1-D chain: walk right to the goal region, -1 per step until you arrive.

    Only the first action coordinate moves the state; the second exists so both
    environments share an action space. Episodes cap at 40 steps; a capped
    episode is cut off, not terminal, so its last transition bootstraps.
    """

    name = "line-world"
    state_dim = 1
    action_dim = 2
    horizon = 40
    step_size = 0.2
    goal = 0.9
    # Accumulated 0.2-steps can land a few ulp below an exactly reachable goal
    # (-0.5 + 7*0.2 sums to 0.8999999999999999); the tolerance keeps episode
    # lengths equal to their exact-arithmetic values.
    goal_tol = 1e-9

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, -0.5, size=1)

    def step(self, s: np.ndarray, a) -> tuple[np.ndarray, float, bool]:
        a = _check_action(a, self.action_dim)
        s2 = np.clip(np.asarray(s, dtype=np.float64) + self.step_size * a[0], -1.0, 1.0)
        reached = bool(s2[0] >= self.goal - self.goal_tol)
        return s2, 0.0 if reached else -1.0, reached


ENVS = {TwoCornerBandit.name: TwoCornerBandit, LineWorld.name: LineWorld}


def make_env(name: str):
    if name not in ENVS:
        raise ContractError(f"unknown environment {name!r}; pick one of {sorted(ENVS)}")
    return ENVS[name]()


# ---------------------------------------------------------------------------
# behavior policies

BANDIT_BEHAVIOR_MODES = (np.array([-0.4, -0.4]), np.array([0.4, 0.4]))
BANDIT_BEHAVIOR_STD = 0.25
LINEWORLD_EPSILON = 0.5
LINEWORLD_GO_RIGHT = np.array([1.0, 0.0])


def bandit_behavior(s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Equal mixture of two round Gaussians, rejection-sampled into the box.

    The modes sit between the origin and the reward corners, so the behavior
    density peaks nowhere near the reward peaks.
    """
    while True:
        mode = BANDIT_BEHAVIOR_MODES[int(rng.integers(2))]
        a = mode + BANDIT_BEHAVIOR_STD * rng.standard_normal(2)
        if np.abs(a).max() <= 1.0:
            return a


def lineworld_behavior(s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """With probability epsilon a uniform action, otherwise march right."""
    if rng.random() < LINEWORLD_EPSILON:
        return rng.uniform(-1.0, 1.0, size=2)
    return LINEWORLD_GO_RIGHT.copy()


BEHAVIORS = {
    TwoCornerBandit.name: bandit_behavior,
    LineWorld.name: lineworld_behavior,
}


# ---------------------------------------------------------------------------
# transition storage


@dataclass
class TransitionBatch:
    """Column-major transitions: states, actions, rewards, next states, done flags."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.s2 = np.asarray(self.s2, dtype=np.float64)
        self.done = np.asarray(self.done, dtype=np.float64).reshape(-1)
        n = len(self.s)
        if not (len(self.a) == len(self.r) == len(self.s2) == len(self.done) == n):
            raise ContractError("transition columns have unequal lengths")
        if self.s.shape != self.s2.shape:
            raise ContractError("state and next-state shapes differ")
        if n and np.abs(self.a).max() > 1.0 + _BOX_TOL:
            raise ContractError("batch contains actions outside the action box")
        if not np.isin(self.done, (0.0, 1.0)).all():
            raise ContractError("done flags must be 0 or 1")

    def __len__(self) -> int:
        return len(self.r)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(self.s[idx], self.a[idx], self.r[idx],
                               self.s2[idx], self.done[idx])


def generate_dataset(env, behavior, episodes: int, seed: int) -> TransitionBatch:
    """Roll the behavior policy for a fixed episode count.

    Each episode draws from its own seed-derived stream, so the dataset is
    reproducible episode by episode regardless of how episodes are batched.
    """
    if episodes < 1:
        raise PreconditionError("need at least one episode")
    cols = {k: [] for k in ("s", "a", "r", "s2", "done")}
    children = np.random.SeedSequence(seed).spawn(episodes)
    for child in children:
        rng = np.random.Generator(np.random.Philox(child))
        s = env.reset(rng)
        for _ in range(env.horizon):
            a = behavior(s, rng)
            s2, r, done = env.step(s, a)
            cols["s"].append(s)
            cols["a"].append(a)
            cols["r"].append(r)
            cols["s2"].append(s2)
            cols["done"].append(1.0 if done else 0.0)
            if done:
                break
            s = s2
    return TransitionBatch(
        np.array(cols["s"]), np.array(cols["a"]), np.array(cols["r"]),
        np.array(cols["s2"]), np.array(cols["done"]),
    )


# ---------------------------------------------------------------------------
# RFDS file format: magic "RFDS", version u32 LE, state-dim u32, action-dim u32,
# row-count u64, then row-major (s, a, r, s2, done) as little-endian f64.

DATASET_MAGIC = b"RFDS"
DATASET_VERSION = 1


def dataset_bytes(batch: TransitionBatch) -> bytes:
    n = len(batch)
    ds = batch.s.shape[1] if batch.s.ndim == 2 else 0
    da = batch.a.shape[1] if batch.a.ndim == 2 else 0
    rows = np.concatenate(
        [batch.s, batch.a, batch.r[:, None], batch.s2, batch.done[:, None]], axis=1
    ) if n else np.zeros((0, 2 * ds + da + 2))
    head = DATASET_MAGIC + struct.pack("<IIIQ", DATASET_VERSION, ds, da, n)
    return head + rows.astype("<f8").tobytes()


def parse_dataset(buf: bytes) -> TransitionBatch:
    off = 0

    def need(k: int, what: str) -> bytes:
        nonlocal off
        if off + k > len(buf):
            raise FormatError(f"truncated dataset: {what} at byte {off}")
        out = buf[off:off + k]
        off += k
        return out

    if need(4, "magic") != DATASET_MAGIC:
        raise FormatError("bad magic at byte 0; not an RFDS file")
    version, ds, da, n = struct.unpack("<IIIQ", need(20, "header"))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version} at byte 4")
    width = 2 * ds + da + 2
    payload = need(8 * width * n, f"{n} rows of {width} floats")
    if off != len(buf):
        raise FormatError(f"trailing bytes after row {n} at byte {off}")
    rows = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, width)
    return TransitionBatch(
        rows[:, :ds], rows[:, ds:ds + da], rows[:, ds + da],
        rows[:, ds + da + 1:2 * ds + da + 1], rows[:, 2 * ds + da + 1],
    )


def write_dataset(batch: TransitionBatch, path) -> None:
    with open(path, "wb") as f:
        f.write(dataset_bytes(batch))


def read_dataset(path) -> TransitionBatch:
    with open(path, "rb") as f:
        return parse_dataset(f.read())
