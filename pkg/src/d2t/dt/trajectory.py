"""Trajectories (return-to-go, state, action, reward) and the replay buffer.

Binary buffer layout (little-endian)::

    magic b"D2TTRAJ\\0", version u32, N u32, M u32, T u32, N_p u32, count u64
    per trajectory: env_id i64, then float64 arrays
        rewards (T), returns_to_go (T), states (T x 2NM), actions (T x N), pilots (T x 2N_p)

States are raw (un-normalised) channel vectors; models apply their own scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from os import PathLike
from typing import Iterator, Optional

import numpy as np

from ..channel import quantize_reward

MAGIC = b"D2TTRAJ\0"
VERSION = 1


def compute_returns_to_go(rewards) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("rewards must be a non-empty 1-D sequence")
    # exact (both R[t] == R[t+1] + r[t] and the difference form) for quantised rewards
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = acc + rewards[t]
        out[t] = acc
    return out


@dataclass
class Trajectory:
    returns_to_go: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    pilots: np.ndarray
    env_id: int = 0

    def __post_init__(self):
        T = len(self.rewards)
        for name in ("returns_to_go", "states", "actions", "pilots"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {T}")

    @classmethod
    def from_rollout(cls, states, actions, rewards, pilots, env_id: int = 0) -> "Trajectory":
        rewards = quantize_reward(rewards)
        return cls(
            compute_returns_to_go(rewards),
            np.asarray(states, dtype=np.float64),
            np.asarray(actions, dtype=np.float64),
            rewards,
            np.asarray(pilots, dtype=np.float64),
            int(env_id),
        )

    def __len__(self) -> int:
        return len(self.rewards)

    def telescopes(self) -> bool:
        r = self.returns_to_go
        return bool(
            np.all(r[:-1] == r[1:] + self.rewards[:-1])
            and np.all(r[:-1] - r[1:] == self.rewards[:-1])
            and r[-1] == self.rewards[-1]
        )


class TrajectoryBuffer:
    def __init__(self, N: int, M: int, T: int, n_pilots: int, capacity: Optional[int] = None):
        self.N, self.M, self.T, self.n_pilots = N, M, T, n_pilots
        self.capacity = capacity
        self.trajectories: list[Trajectory] = []

    def add(self, traj: Trajectory) -> None:
        if len(traj) != self.T:
            raise ValueError(f"trajectory length {len(traj)} != buffer T {self.T}")
        if traj.states.shape[1] != 2 * self.N * self.M or traj.actions.shape[1] != self.N:
            raise ValueError("trajectory dimensions do not match the buffer")
        if traj.pilots.shape[1] != 2 * self.n_pilots:
            raise ValueError("pilot dimension does not match the buffer")
        if not traj.telescopes():
            raise ValueError("returns-to-go do not telescope to the rewards")
        if self.capacity is not None and len(self.trajectories) >= self.capacity:
            self.trajectories.pop(0)
        self.trajectories.append(traj)

    def extend(self, other: "TrajectoryBuffer") -> None:
        for traj in other:
            self.add(traj)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def env_ids(self) -> list[int]:
        return sorted({t.env_id for t in self.trajectories})

    def stacked(self, name: str) -> np.ndarray:
        return np.stack([getattr(t, name) for t in self.trajectories])

    def episode_returns(self) -> np.ndarray:
        return np.array([t.returns_to_go[0] for t in self.trajectories])

    def mean_reward(self) -> float:
        return float(np.mean(self.stacked("rewards"))) if self.trajectories else float("nan")

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<5IQ", VERSION, self.N, self.M, self.T, self.n_pilots, len(self))]
        for t in self.trajectories:
            parts.append(struct.pack("<q", t.env_id))
            for arr in (t.rewards, t.returns_to_go, t.states, t.actions, t.pilots):
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryBuffer":
        if data[:8] != MAGIC:
            raise ValueError("not a trajectory buffer file")
        version, N, M, T, n_p, count = struct.unpack_from("<5IQ", data, 8)
        if version != VERSION:
            raise ValueError(f"unsupported buffer version {version}")
        buf = cls(N, M, T, n_p)
        off = 8 + struct.calcsize("<5IQ")
        sizes = [(T,), (T,), (T, 2 * N * M), (T, N), (T, 2 * n_p)]
        for _ in range(count):
            (env_id,) = struct.unpack_from("<q", data, off)
            off += 8
            arrays = []
            for shape in sizes:
                n = int(np.prod(shape))
                arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
                off += 8 * n
            rewards, rtg, states, actions, pilots = arrays
            buf.trajectories.append(Trajectory(rtg, states, actions, rewards, pilots, int(env_id)))
        if off != len(data):
            raise ValueError("trailing bytes in buffer file")
        return buf

    def save(self, path: str | PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | PathLike) -> "TrajectoryBuffer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def export_jsonl(self, path: str | PathLike) -> None:
        with open(path, "w") as fh:
            for t in self.trajectories:
                row = {
                    "env_id": t.env_id,
                    "rewards": t.rewards.tolist(),
                    "returns_to_go": t.returns_to_go.tolist(),
                    "actions": t.actions.tolist(),
                    "states": t.states.tolist(),
                    "pilots": t.pilots.tolist(),
                }
                fh.write(json.dumps(row) + "\n")
