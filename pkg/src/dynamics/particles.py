"""
Exact event-driven simulation of N weakly interacting particles.

Every particle in state x jumps to y at rate Γ_{x,y}(μ^N), where μ^N is the
current empirical measure, so the empirical measure moves by (e_y − e_x)/N at
each event. Events are drawn with the direct method: exponential waiting time
from the total rate, then the source state by its share N·μ_x·(exit rate of x),
then the target by the off-diagonal row, then a particle uniformly among those
in the source state.

Randomness: the two children of SeedSequence(seed) drive the initial states and
the events; the seed object itself is never advanced.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DomainError, ModelError, SimulationError
from src.models.spec import GeneratorSpec, evaluate_generator
from src.state_space import LevelPhaseLayout, ProbabilityVector, unflatten_index


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EventRecord:
    time: float
    source: Tuple[int, int]
    target: Tuple[int, int]
    rate: float
    exit_rate: float
    total_rate: float
    empirical: np.ndarray = field(repr=False, compare=False)


EventHook = Callable[[EventRecord], None]


@dataclass(frozen=True, eq=False)
class EmpiricalTrajectory:
    layout: LevelPhaseLayout
    sample_times: np.ndarray
    measures: Tuple[ProbabilityVector, ...]
    N: int
    seed: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.sample_times

    @property
    def states(self) -> Tuple[ProbabilityVector, ...]:
        return self.measures

    @property
    def values(self) -> np.ndarray:
        return np.vstack([m.values for m in self.measures])

    @property
    def final(self) -> ProbabilityVector:
        return self.measures[-1]

    def __len__(self) -> int:
        return len(self.measures)


def stream_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def replication_seed(seed: int, replications: int, index: int) -> np.random.SeedSequence:
    """Seed of replication `index` out of `replications` runs."""
    return stream_seeds(seed, replications)[index]


class ParticleSystem:
    def __init__(self, spec: GeneratorSpec, states: Sequence[int], rng_seed: int = 0, clock: float = 0.0) -> None:
        self.spec = spec
        self.layout = spec.layout
        self.states = np.array(states, dtype=int)
        if self.states.ndim != 1 or self.states.size < 1:
            raise DomainError("A particle system needs at least one particle")
        if self.states.min() < 0 or self.states.max() >= self.layout.dimension:
            raise DomainError("Particle state outside the truncated state space")
        self.N = int(self.states.size)
        self.rng_seed = rng_seed
        self.clock = clock
        self.jump_count = 0
        self.counts = np.bincount(self.states, minlength=self.layout.dimension)
        self.members: List[List[int]] = [[] for _ in range(self.layout.dimension)]
        self.position = np.zeros(self.N, dtype=int)
        for particle, state in enumerate(self.states):
            self.position[particle] = len(self.members[state])
            self.members[state].append(particle)

    @classmethod
    def from_distribution(cls, spec: GeneratorSpec, N: int, q: ProbabilityVector, rng: np.random.Generator, rng_seed: int = 0) -> "ParticleSystem":
        if N < 1:
            raise DomainError("N must be >= 1")
        states = rng.choice(spec.layout.dimension, size=N, p=q.values)
        return cls(spec, states, rng_seed=rng_seed)

    def empirical(self) -> ProbabilityVector:
        return ProbabilityVector(self.layout, self.counts / self.N)

    def particle_states(self) -> List[Tuple[int, int]]:
        return [unflatten_index(self.layout, int(s)) for s in self.states]

    def move(self, particle: int, target: int) -> None:
        source = int(self.states[particle])
        bucket = self.members[source]
        slot = self.position[particle]
        last = bucket.pop()
        if last != particle:
            bucket[slot] = last
            self.position[last] = slot
        self.position[particle] = len(self.members[target])
        self.members[target].append(particle)
        self.states[particle] = target
        self.counts[source] -= 1
        self.counts[target] += 1
        self.jump_count += 1

    def dump(self) -> Dict[str, Any]:
        occupied = np.flatnonzero(self.counts)
        return {
            "clock": self.clock,
            "jump_count": self.jump_count,
            "counts": {str(unflatten_index(self.layout, int(i))): int(self.counts[i]) for i in occupied},
        }


def _sample_times(t_end: float, sample_dt: float) -> np.ndarray:
    count = int(np.floor(t_end / sample_dt + 1e-9))
    times = np.arange(count + 1, dtype=float) * sample_dt
    if times[-1] < t_end - 1e-12:
        times = np.append(times, t_end)
    else:
        times[-1] = min(times[-1], t_end)
    return times


def _pick(weights: np.ndarray, u: float) -> int:
    """Index drawn with probability proportional to weights; zero weights are never drawn."""
    cumulative = np.cumsum(weights)
    index = int(np.searchsorted(cumulative, u * cumulative[-1], side="right"))
    if index >= weights.size:
        index = int(np.flatnonzero(weights > 0.0)[-1])
    return index


def simulate(
    spec: GeneratorSpec,
    N: int,
    q: ProbabilityVector,
    t_end: float,
    sample_dt: float,
    seed: Any,
    on_event: Optional[EventHook] = None,
    permutation: Optional[Sequence[int]] = None,
) -> EmpiricalTrajectory:
    """
    Exact-jump simulation from i.i.d. initial states drawn from q. `seed` is an
    integer or a SeedSequence; `permutation` reassigns the drawn initial states
    among particles (particle i starts where particle permutation[i] was drawn).
    """
    if N < 1:
        raise DomainError("N must be >= 1")
    if not t_end > 0 or not sample_dt > 0:
        raise DomainError("t_end and sample_dt must be positive")
    if q.layout != spec.layout:
        raise DomainError("Initial vector does not live on the model layout")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    init_seq, event_seq = (
        np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (i,), pool_size=root.pool_size) for i in range(2)
    )
    system = ParticleSystem.from_distribution(spec, N, q, np.random.default_rng(init_seq), rng_seed=root.entropy)
    if permutation is not None:
        order = np.asarray(permutation, dtype=int)
        if sorted(order.tolist()) != list(range(N)):
            raise DomainError("permutation must be a bijection on the particle indices")
        system = ParticleSystem(spec, system.states[order], rng_seed=system.rng_seed)
    rng = np.random.default_rng(event_seq)

    times = _sample_times(t_end, sample_dt)
    measures: List[ProbabilityVector] = []
    constant = evaluate_generator(spec, q).matrix if spec.is_linear else None
    t = 0.0
    while True:
        x = system.counts / N
        try:
            generator = constant if constant is not None else evaluate_generator(spec, ProbabilityVector(spec.layout, x)).matrix
        except (ModelError, DomainError) as exc:
            raise SimulationError(f"Rate evaluation failed: {exc}", system.dump()) from exc
        exit_rates = -np.diag(generator)
        occupied = np.flatnonzero(system.counts)
        state_rates = system.counts[occupied] * exit_rates[occupied]
        total = float(state_rates.sum())
        if not np.isfinite(total) or total < 0.0:
            raise SimulationError(f"Invalid total event rate {total!r}", system.dump())

        t_next = t + rng.exponential(1.0 / total) if total > 0.0 else np.inf
        while len(measures) < len(times) and times[len(measures)] < t_next:
            measures.append(ProbabilityVector(spec.layout, x))
        if t_next > t_end:
            break

        source = int(occupied[_pick(state_rates, rng.random())])
        row = np.clip(generator[source], 0.0, None)
        row[source] = 0.0
        target = _pick(row, rng.random())
        bucket = system.members[source]
        particle = bucket[int(rng.integers(len(bucket)))]
        if on_event is not None:
            on_event(EventRecord(
                time=t_next,
                source=unflatten_index(spec.layout, source),
                target=unflatten_index(spec.layout, target),
                rate=float(generator[source, target]),
                exit_rate=float(exit_rates[source]),
                total_rate=total,
                empirical=x.copy(),
            ))
        system.move(particle, target)
        t = t_next
        system.clock = t

    logger.debug("[sim] N=%d reached t=%g after %d jumps", N, t_end, system.jump_count)
    return EmpiricalTrajectory(
        layout=spec.layout,
        sample_times=times,
        measures=tuple(measures),
        N=N,
        seed=int(seed) if not isinstance(seed, np.random.SeedSequence) else int(root.entropy),
        metadata={"jump_count": system.jump_count},
    )


def time_average(traj: EmpiricalTrajectory, burn_in: float = 0.0) -> ProbabilityVector:
    """Average of the sampled empirical measures at times >= burn_in."""
    mask = traj.sample_times >= burn_in
    if not mask.any():
        raise DomainError(f"No samples after burn-in {burn_in}")
    return ProbabilityVector.project(traj.layout, traj.values[mask].mean(axis=0))[0]


def batch_means_se(series: np.ndarray, batches: int = 20) -> np.ndarray:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    data = np.asarray(series, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    size = data.shape[0] // batches
    if size < 1 or batches < 2:
        raise DomainError(f"Need at least {batches} samples for {batches} batches")
    means = data[: size * batches].reshape(batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)
