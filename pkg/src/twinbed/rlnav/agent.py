"""Double Q-learning agents: a small numpy MLP (default) and a tabular variant."""
from __future__ import annotations

from collections import defaultdict

import numpy as np


class TrainDiverged(ArithmeticError):
    pass


def linear_epsilon(step: int, total_steps: int, start: float = 0.5, end: float = 0.01,
                   decay_frac: float = 0.8) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``decay_frac`` of training."""
    horizon = max(1, int(total_steps * decay_frac))
    frac = min(1.0, step / horizon)
    return start + (end - start) * frac


class Mlp:
    """One hidden ReLU layer, linear head."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> None:
        self.params = {
            "W1": rng.normal(0, np.sqrt(2.0 / n_in), (n_in, n_hidden)),
            "b1": np.zeros(n_hidden),
            "W2": rng.normal(0, np.sqrt(1.0 / n_hidden), (n_hidden, n_out)) * 0.1,
            "b2": np.zeros(n_out),
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        return np.maximum(x @ p["W1"] + p["b1"], 0.0) @ p["W2"] + p["b2"]

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
        return h @ p["W2"] + p["b2"], h

    def grads(self, x: np.ndarray, h: np.ndarray, dout: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        dh = (dout @ p["W2"].T) * (h > 0)
        return {"W1": x.T @ dh, "b1": dh.sum(0), "W2": h.T @ dout, "b2": dout.sum(0)}

    def copy_from(self, other: "Mlp") -> None:
        self.params = {k: v.copy() for k, v in other.params.items()}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Replay:
    def __init__(self, capacity: int, n_in: int) -> None:
        self.s = np.zeros((capacity, n_in))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, n_in))
        self.done = np.zeros(capacity)
        self.disc = np.zeros(capacity)
        self.capacity = capacity
        self.size = 0
        self.i = 0

    def add(self, s, a, r, s2, done, disc) -> None:
        i = self.i
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self.disc[i] = disc
        self.i = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], self.disc[idx]


class DoubleQLearner:
    """Online network picks the bootstrap action, the target network values it."""

    def __init__(self, n_in: int, n_actions: int = 4, hidden: int = 64, lr: float = 1e-3,
                 gamma: float = 0.99, target_sync: int = 1000, replay: int = 50_000,
                 batch: int = 64, huber_delta: float = 1.0, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.online = Mlp(n_in, hidden, n_actions, self.rng)
        self.target = Mlp(n_in, hidden, n_actions, self.rng)
        self.target.copy_from(self.online)
        self.opt = Adam(self.online.params, lr)
        self.replay = Replay(replay, n_in)
        self.gamma, self.target_sync, self.batch, self.delta = gamma, target_sync, batch, huber_delta
        self.n_actions = n_actions
        self.updates = 0

    def q_values(self, x: np.ndarray) -> np.ndarray:
        return self.online.forward(np.atleast_2d(x))[0]

    def act(self, x: np.ndarray, epsilon: float = 0.0) -> int:
        if epsilon > 0 and self.rng.random() < epsilon:
            return int(self.rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(x)))

    def remember(self, s, a, r, s2, done, disc: float | None = None) -> None:
        """Store a transition; ``r`` may be an n-step return with bootstrap factor ``disc``."""
        self.replay.add(s, a, r, s2, float(done), self.gamma if disc is None else disc)

    def train_step(self) -> float:
        s, a, r, s2, done, disc = self.replay.sample(self.batch, self.rng)
        a_star = np.argmax(self.online.forward(s2), axis=1)
        q_next = self.target.forward(s2)[np.arange(len(a)), a_star]
        y = r + disc * (1.0 - done) * q_next
        q, h = self.online.forward_cache(s)
        rows = np.arange(len(a))
        err = q[rows, a] - y
        d = self.delta
        loss = float(np.mean(np.where(np.abs(err) <= d, 0.5 * err ** 2, d * (np.abs(err) - 0.5 * d))))
        if not np.isfinite(loss):
            raise TrainDiverged(f"non-finite loss after {self.updates} updates")
        dout = np.zeros_like(q)
        dout[rows, a] = np.clip(err, -d, d) / len(a)
        self.opt.update(self.online.params, self.online.grads(s, h, dout))
        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.target.copy_from(self.online)
        return loss

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.online.params.items()}

    def load_state_dict(self, params: dict[str, np.ndarray]) -> None:
        self.online.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.target.copy_from(self.online)


class TabularDoubleQ:
    """Lookup-table Double Q-learning keyed on the exact observation.

    Same online/target split as the network learner; the target table is a
    periodic copy.
    """

    def __init__(self, n_actions: int = 4, lr: float = 0.5, gamma: float = 0.99,
                 target_sync: int = 100, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.online: dict[bytes, np.ndarray] = defaultdict(lambda: np.zeros(n_actions))
        self.target: dict[bytes, np.ndarray] = {}
        self.lr, self.gamma, self.target_sync = lr, gamma, target_sync
        self.n_actions = n_actions
        self.updates = 0

    def q_values(self, key: bytes) -> np.ndarray:
        return self.online[key]

    def act(self, key: bytes, epsilon: float = 0.0) -> int:
        if epsilon > 0 and self.rng.random() < epsilon:
            return int(self.rng.integers(self.n_actions))
        return int(np.argmax(self.online[key]))

    def update(self, s: bytes, a: int, r: float, s2: bytes, done: bool) -> None:
        if done:
            y = r
        else:
            a_star = int(np.argmax(self.online[s2]))
            tq = self.target.get(s2)
            y = r + self.gamma * (0.0 if tq is None else tq[a_star])
        q = self.online[s]
        q[a] += self.lr * (y - q[a])
        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.target = {k: v.copy() for k, v in self.online.items()}
