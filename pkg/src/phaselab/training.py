"""DQN training: Bellman targets, prioritized learner, and exploration actors.

The acting and learning halves are decoupled: N actors run epsilon-greedy
episodes on private simulator instances and push transitions into a sink; one
learner drains the sink into the prioritized buffer, samples batches, applies
Adam on a masked Huber loss, and periodically syncs the target network and
publishes parameter snapshots the actors pick up.

Two schedules implement that contract. The threaded mode runs actors and the
learner concurrently with a bounded queue providing backpressure. The
synchronous mode interleaves everything on one thread on a fixed schedule
(each actor takes one decision per learner step) and is bit-reproducible.
"""

from __future__ import annotations

import csv
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .replay import PrioritizedReplayBuffer
from .simulator import IntersectionSim, run_controller
from .state import TrafficState


@dataclass
class Transition:
    state: TrafficState
    action: int
    reward: float
    next_state: TrafficState
    done: bool
    priority: float = 0.0  # assigned by the replay buffer


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    batch_size: int = 64
    buffer_capacity: int = 200_000
    target_sync: int = 500  # learner steps between target copies
    alpha: float = 0.6  # priority exponent
    beta_start: float = 0.4  # IS exponent, annealed linearly to beta_end
    beta_end: float = 1.0
    epsilon: float = 0.4  # base exploration rate
    alpha_eps: float = 7.0  # per-actor exponent spread
    n_actors: int = 4
    lr: float = 1e-3
    lr_end: float | None = None  # exponential decay target over the step budget
    priority_eps: float = 1e-3
    double_dqn: bool = True
    max_learner_steps: int = 10_000
    warmup_transitions: int = 500
    eval_period: int = 500
    snapshot_period: int = 10  # actor decisions between snapshot refreshes
    queue_capacity: int = 10_000
    sync: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.n_actors < 1:
            raise ValueError("need at least one actor")

    def beta(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.max_learner_steps))
        return self.beta_start + (self.beta_end - self.beta_start) * frac

    def learning_rate(self, step: int) -> float:
        if self.lr_end is None:
            return self.lr
        frac = min(1.0, step / max(1, self.max_learner_steps))
        return float(self.lr * (self.lr_end / self.lr) ** frac)

    def actor_epsilon(self, actor_id: int) -> float:
        if self.n_actors == 1:
            return self.epsilon
        exponent = 1.0 + actor_id * self.alpha_eps / (self.n_actors - 1)
        return self.epsilon**exponent


def _batch_features(states: Sequence[TrafficState]) -> tuple[np.ndarray, np.ndarray]:
    counts = np.stack([s.counts for s in states]).astype(np.float64)
    bits = np.stack([s.signal_bits for s in states]).astype(np.float64)
    return counts, bits


def _targets_only(
    batch: Sequence[Transition],
    network,
    online_params: dict[str, Tensor],
    target_params: dict[str, Tensor],
    gamma: float,
    double_dqn: bool,
) -> np.ndarray:
    counts, bits = _batch_features([t.next_state for t in batch])
    q_target_next = network.forward(target_params, counts, bits).data
    if double_dqn:
        q_online_next = network.forward(online_params, counts, bits).data
        best = np.argmax(q_online_next, axis=1)
    else:
        best = np.argmax(q_target_next, axis=1)
    boot = q_target_next[np.arange(len(batch)), best]
    rewards = np.array([t.reward for t in batch])
    not_done = np.array([0.0 if t.done else 1.0 for t in batch])
    return rewards + gamma * not_done * boot


def bellman_targets(
    batch: Sequence[Transition],
    network,
    online_params: dict[str, Tensor],
    target_params: dict[str, Tensor],
    gamma: float,
    double_dqn: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-item TD targets and errors.

    target = r for terminal transitions, else r + gamma * Q_target(s', a*),
    where a* is the online argmax (double-DQN) or the target argmax.
    """
    targets = _targets_only(batch, network, online_params, target_params, gamma, double_dqn)
    counts, bits = _batch_features([t.state for t in batch])
    q_now = network.forward(online_params, counts, bits).data
    actions = np.array([t.action for t in batch])
    td_errors = targets - q_now[np.arange(len(batch)), actions]
    return targets, td_errors


class Learner:
    """Owns the online/target parameters and the prioritized buffer."""

    def __init__(
        self,
        network,
        params: dict[str, Tensor],
        config: TrainConfig,
        buffer: PrioritizedReplayBuffer,
        rng: np.random.Generator,
    ):
        self.network = network
        self.config = config
        self.buffer = buffer
        self.rng = rng
        self.online = dict(params)
        self.target = {k: Tensor(t.data) for k, t in params.items()}
        self.adam = nm.adam_init(self.online)
        self.step_count = 0

    def snapshot(self) -> dict[str, Tensor]:
        return {k: Tensor(t.data) for k, t in self.online.items()}

    def step(self) -> float:
        cfg = self.config
        indices, batch, weights = self.buffer.sample(
            cfg.batch_size, cfg.beta(self.step_count), self.rng
        )
        targets = _targets_only(
            batch, self.network, self.online, self.target, cfg.gamma, cfg.double_dqn
        )
        counts, bits = _batch_features([t.state for t in batch])
        tape = nm.Tape()
        q_pred = self.network.forward(self.online, counts, bits, tape)
        n_actions = q_pred.data.shape[1]
        actions = np.array([t.action for t in batch])
        rows = np.arange(len(batch))
        td_errors = targets - q_pred.data[rows, actions]
        mask = np.zeros((len(batch), n_actions))
        mask[rows, actions] = weights
        target_mat = np.broadcast_to(targets[:, None], (len(batch), n_actions))
        loss = nm.huber_loss(q_pred, Tensor(target_mat), Tensor(mask), delta=1.0, tape=tape)
        grads = nm.backward(tape, loss, self.online)
        self.online = nm.adam_update(
            self.online, grads, self.adam, lr=cfg.learning_rate(self.step_count)
        )
        self.buffer.update_priorities(indices, np.abs(td_errors) + cfg.priority_eps)
        self.step_count += 1
        if self.step_count % cfg.target_sync == 0:
            self.target = {k: Tensor(t.data) for k, t in self.online.items()}
        return float(loss.data)


class EpsilonGreedyPolicy:
    """Epsilon-greedy over the Q-values of a (refreshable) parameter snapshot."""

    def __init__(self, network, params: dict[str, Tensor], epsilon: float, rng: np.random.Generator):
        self.network = network
        self.params = params
        self.epsilon = epsilon
        self.rng = rng

    def __call__(self, state: TrafficState) -> int:
        if self.epsilon > 0.0 and self.rng.random() < self.epsilon:
            return int(self.rng.integers(self.network.n_actions))
        return int(np.argmax(self.network.q_values(self.params, state)))


class GreedyPolicy:
    """Greedy evaluation policy with symmetry-respecting tie-breaking.

    Exact Q ties are structural here: phases whose members carry identical
    (count, signal) features score identically, and breaking such ties by
    phase index does not commute with intersection symmetries, which would
    spoil transfer evaluations. Ties are broken by member queue content, then
    by keeping the current phase; both keys permute along with the state. The
    raw index only decides between phases the state cannot distinguish.
    """

    def __init__(self, network, params: dict[str, Tensor]):
        self.network = network
        self.params = params
        table = network.table
        self._members = []
        self._cross_approach = []
        for ph in table.phases:
            i, j = ph.members
            mi, mj = table.movements[i], table.movements[j]
            if mi.approach == mj.approach:
                # same-approach pair: through before left is symmetry-stable
                ordered = (i, j) if mi.turn < mj.turn else (j, i)
                self._cross_approach.append(False)
                self._members.append(ordered)
            else:
                self._cross_approach.append(True)
                self._members.append((i, j))

    def _tie_key(self, p: int, state: TrafficState):
        i, j = self._members[p]
        fi = (-int(state.counts[i]), -int(state.signal_bits[i]))
        fj = (-int(state.counts[j]), -int(state.signal_bits[j]))
        if self._cross_approach[p]:
            # members share a turn type; order by features instead
            fi, fj = min(fi, fj), max(fi, fj)
        total = int(state.counts[i] + state.counts[j])
        return (-total, self._cross_approach[p], fi, fj, p != state.phase_index, p)

    def __call__(self, state: TrafficState) -> int:
        q = self.network.q_values(self.params, state)
        best = np.flatnonzero(q == q.max())
        if len(best) == 1:
            return int(best[0])
        return int(min(best, key=lambda p: self._tie_key(int(p), state)))


class Actor:
    """Runs epsilon-greedy episodes on private simulators, emitting transitions.

    ``env_factory(actor_id, episode)`` must build a fresh IntersectionSim; the
    snapshot channel is polled every ``snapshot_period`` decisions.
    """

    def __init__(
        self,
        actor_id: int,
        network,
        epsilon: float,
        env_factory: Callable[[int, int], IntersectionSim],
        snapshot_fn: Callable[[], dict[str, Tensor]],
        sink: Callable[[Transition], None],
        seed: int,
        snapshot_period: int = 10,
    ):
        self.actor_id = actor_id
        self.network = network
        self.env_factory = env_factory
        self.snapshot_fn = snapshot_fn
        self.sink = sink
        self.snapshot_period = snapshot_period
        self.policy = EpsilonGreedyPolicy(network, snapshot_fn(), epsilon, np.random.default_rng(seed))
        self.episode = 0
        self.decisions = 0
        self._sim: IntersectionSim | None = None
        self._state: TrafficState | None = None

    def _ensure_episode(self) -> None:
        if self._sim is None:
            self._sim = self.env_factory(self.actor_id, self.episode)
            self._state = self._sim.reset()

    def take_decision(self) -> None:
        """One environment decision: act, observe, push the transition."""
        self._ensure_episode()
        if self.decisions % self.snapshot_period == 0:
            self.policy.params = self.snapshot_fn()
        action = self.policy(self._state)
        next_state, reward, done = self._sim.step(action)
        self.sink(
            Transition(state=self._state, action=action, reward=reward, next_state=next_state, done=done)
        )
        self.decisions += 1
        if done:
            self.episode += 1
            self._sim = None
            self._state = None
        else:
            self._state = next_state


@dataclass(frozen=True)
class CurvePoint:
    learner_step: int
    eval_travel_time: float
    exited_count: int
    censored_travel_time: float = 0.0  # counts stranded vehicles; ranking metric


def censored_travel_time(metrics, episode_length: float) -> float:
    """Mean travel time with still-in-network vehicles charged up to episode end.

    The exited-only average rewards starving low-priority movements; charging
    every vehicle at least its time in the network so far removes that loophole
    when ranking checkpoints.
    """
    total = 0.0
    count = 0
    for r in metrics.vehicles:
        if r.exit is not None:
            total += r.exit - r.entry
            count += 1
        elif r.entry < episode_length:
            total += episode_length - r.entry
            count += 1
    return total / count if count else 0.0


@dataclass
class TrainResult:
    best_params: dict[str, Tensor]
    best_travel_time: float
    best_step: int
    curve: list[CurvePoint] = field(default_factory=list)
    final_params: dict[str, Tensor] = field(default_factory=dict)


def write_curve_csv(curve: Sequence[CurvePoint], path: str | Path) -> Path:
    path = Path(path)
    lines = ["learner_step,eval_travel_time,exited_count"]
    for p in curve:
        lines.append(f"{p.learner_step},{format(p.eval_travel_time, '.6g')},{p.exited_count}")
    path.write_text("\n".join(lines) + "\n")
    return path


def train(
    network,
    config: TrainConfig,
    env_factory: Callable[[int, int], IntersectionSim],
    eval_factory: Callable[[], IntersectionSim],
    seed: int = 0,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Full actor/learner training run; returns the best-by-eval parameters.

    Every ``eval_period`` learner steps (plus step 0 and the final step) a
    greedy episode runs on the held-out evaluation environment and its travel
    time is appended to the learning curve.
    """
    init_params = network.init_params(seed)
    buffer = PrioritizedReplayBuffer(config.buffer_capacity, config.alpha)
    learner = Learner(network, init_params, config, buffer, np.random.default_rng(seed + 1))
    result = TrainResult(
        best_params=learner.snapshot(), best_travel_time=np.inf, best_step=0
    )

    def evaluate(step: int) -> None:
        sim = eval_factory()
        state = sim.reset()
        policy = GreedyPolicy(network, learner.snapshot())
        done = False
        while not done:
            state, _, done = sim.step(policy(state))
        m = sim.metrics()
        censored = censored_travel_time(m, sim.config.episode_length)
        result.curve.append(
            CurvePoint(
                learner_step=step,
                eval_travel_time=m.avg_travel_time,
                exited_count=m.exited_count,
                censored_travel_time=censored,
            )
        )
        if censored < result.best_travel_time:
            result.best_travel_time = censored
            result.best_step = step
            result.best_params = learner.snapshot()
        if progress is not None:
            progress(step, censored)

    evaluate(0)
    if config.max_learner_steps > 0:
        if config.sync:
            _train_sync(network, config, env_factory, learner, buffer, evaluate, seed)
        else:
            _train_threaded(network, config, env_factory, learner, buffer, evaluate, seed)
        if learner.step_count % config.eval_period != 0:
            evaluate(learner.step_count)
    result.final_params = learner.snapshot()
    return result


def _make_actors(network, config, env_factory, snapshot_fn, sink, seed) -> list[Actor]:
    return [
        Actor(
            actor_id=i,
            network=network,
            epsilon=config.actor_epsilon(i),
            env_factory=env_factory,
            snapshot_fn=snapshot_fn,
            sink=sink,
            seed=seed * 7919 + 31 * i + 1,
            snapshot_period=config.snapshot_period,
        )
        for i in range(config.n_actors)
    ]


def _train_sync(network, config, env_factory, learner, buffer, evaluate, seed) -> None:
    actors = _make_actors(network, config, env_factory, learner.snapshot, buffer.add, seed)
    warmup = max(config.warmup_transitions, config.batch_size)
    while len(buffer) < warmup:
        for actor in actors:
            actor.take_decision()
    while learner.step_count < config.max_learner_steps:
        for actor in actors:
            actor.take_decision()
        learner.step()
        if learner.step_count % config.eval_period == 0:
            evaluate(learner.step_count)


def _train_threaded(network, config, env_factory, learner, buffer, evaluate, seed) -> None:
    sink: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
    stop = threading.Event()
    lock = threading.Lock()
    latest = {"params": learner.snapshot()}

    def snapshot_fn() -> dict[str, Tensor]:
        with lock:
            return latest["params"]

    def actor_main(actor: Actor) -> None:
        while not stop.is_set():
            try:
                actor.take_decision()
            except Exception:  # surfaced via the report below
                stop.set()
                raise

    def actor_sink(t: Transition) -> None:
        while not stop.is_set():
            try:
                sink.put(t, timeout=0.1)
                return
            except queue.Full:
                continue

    actors = _make_actors(network, config, env_factory, snapshot_fn, actor_sink, seed)
    threads = [
        threading.Thread(target=actor_main, args=(a,), name=f"actor-{a.actor_id}", daemon=True)
        for a in actors
    ]
    for t in threads:
        t.start()
    try:
        warmup = max(config.warmup_transitions, config.batch_size)
        while len(buffer) < warmup:
            buffer.add(sink.get())
        while learner.step_count < config.max_learner_steps:
            while True:  # drain whatever the actors produced
                try:
                    buffer.add(sink.get_nowait())
                except queue.Empty:
                    break
            learner.step()
            with lock:
                latest["params"] = learner.snapshot()
            if learner.step_count % config.eval_period == 0:
                evaluate(learner.step_count)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5.0)
