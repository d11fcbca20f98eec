"""The ten training regimes over a shared task-session lifecycle.

Regimes plug into one SGD loop through narrow hooks (extend the batch, add a
logit-space loss term, add a parameter-space penalty gradient, post-process
the gradient), so a regime with its extras disabled runs the exact same float
operations as plain fine-tuning. Training data flows through an
access-audited interface that records which tasks each session touched.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndcore
from .ndcore import AdamState, ModelSpec, ParamVector
from .scenarios import TaskStream

__all__ = [
    "KINDS",
    "StrategyConfig",
    "TrainConfig",
    "Model",
    "RngBundle",
    "StreamAccess",
    "AccessViolation",
    "SessionOrderError",
    "EwcState",
    "SiState",
    "TeacherSnapshot",
    "MemoryBuffer",
    "ewc_penalty",
    "ewc_penalty_gradient",
    "estimate_fisher",
    "si_update",
    "si_consolidate",
    "si_penalty",
    "si_penalty_gradient",
    "lwf_kd_loss",
    "lwf_kd_dlogits",
    "reservoir_insert",
    "gdumb_insert_balanced",
    "agem_project",
    "gem_project",
    "GemResult",
    "make_strategy",
    "train_task",
    "save_strategy_state",
    "load_strategy_state",
]

KINDS = (
    "Naive",
    "Cumulative",
    "Joint",
    "EWC",
    "LwF",
    "SI",
    "Replay",
    "GDumb",
    "GEM",
    "AGEM",
)

STATE_MAGIC = b"CLS1"


class SessionOrderError(RuntimeError):
    """Sessions must run strictly sequentially: t = completed + 1."""


class AccessViolation(RuntimeError):
    """A session touched train data outside its declared task set."""


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    lam: float = 0.0  # EWC / SI penalty weight
    alpha: float = 0.0  # LwF distillation weight
    tau: float = 2.0  # LwF temperature
    memory_size: int = 0  # Replay / GDumb buffer capacity
    per_task_memory: int = 0  # GEM / A-GEM samples kept per task
    fisher_budget: int = 512  # examples sampled for the Fisher diagonal
    xi: float = 0.1  # SI damping
    gamma: float = 0.0  # GEM constraint margin

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; valid: {KINDS}")
        if self.lam < 0 or self.alpha < 0 or self.gamma < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("distillation temperature must be > 0")
        if self.memory_size < 0 or self.per_task_memory < 0:
            raise ValueError("memory sizes must be >= 0")
        if self.fisher_budget < 1:
            raise ValueError("fisher_budget must be >= 1")
        if self.xi <= 0:
            raise ValueError("si damping xi must be > 0")

    def label(self) -> str:
        """Short human-readable tag, e.g. 'EWC(lam=0.5)'."""
        extras = {
            "EWC": f"lam={self.lam:g}",
            "SI": f"lam={self.lam:g}",
            "LwF": f"alpha={self.alpha:g},tau={self.tau:g}",
            "Replay": f"mem={self.memory_size}",
            "GDumb": f"mem={self.memory_size}",
            "GEM": f"mem={self.per_task_memory}*T",
            "AGEM": f"mem={self.per_task_memory}*T",
        }
        extra = extras.get(self.kind)
        return f"{self.kind}({extra})" if extra else self.kind


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class Model:
    spec: ModelSpec
    params: ParamVector


class RngBundle:
    """Counter-split sub-streams of one master seed.

    Init and shuffle generators are re-derived per use so every regime sees
    the same weight init and the same data order; memory and Fisher streams
    are stateful but never perturb the training-path streams.
    """

    def __init__(self, master_seed: int):
        self.master = int(master_seed)
        self.memory = np.random.default_rng(np.random.SeedSequence([self.master, 2]))
        self.fisher = np.random.default_rng(np.random.SeedSequence([self.master, 3]))

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.master, 0]))

    def shuffle_rng(self, task: int, epoch: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.master, 1, task, epoch]))


class StreamAccess:
    """Audited view of per-task training data.

    Strategies must pull train splits through `train`; every access is logged
    against the active session so the harness can verify that session t used
    only its allowed tasks.
    """

    def __init__(self, train_sets: list[tuple[np.ndarray, np.ndarray]]):
        self._sets = list(train_sets)
        self.session: int | None = None
        self.accessed: dict[int, set[int]] = {}

    @classmethod
    def from_stream(cls, stream: TaskStream) -> "StreamAccess":
        return cls([(task.train_x, task.train_y) for task in stream.tasks])

    @property
    def n_tasks(self) -> int:
        return len(self._sets)

    def begin_session(self, t: int) -> None:
        self.session = t
        self.accessed.setdefault(t, set())

    def train(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if not 1 <= k <= self.n_tasks:
            raise ValueError(f"task index {k} out of range 1..{self.n_tasks}")
        if self.session is not None:
            self.accessed[self.session].add(k)
        return self._sets[k - 1]

    def accessed_in(self, t: int) -> set[int]:
        return set(self.accessed.get(t, set()))


# ---------------------------------------------------------------------------
# Regularizer state and operations


def _values(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


@dataclass
class EwcState:
    """One (theta*, Fisher diagonal) anchor per completed task."""

    anchors: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def add(self, theta_star, fisher) -> None:
        fisher = np.asarray(fisher, dtype=np.float64)
        if (fisher < 0).any():
            raise ValueError("Fisher diagonal must be elementwise >= 0")
        self.anchors.append((_values(theta_star).copy(), fisher.copy()))


def ewc_penalty(state: EwcState, theta, lam: float) -> float:
    """(lam/2) * sum over anchors of F_i (theta_i - theta*_i)^2."""
    theta = _values(theta)
    total = 0.0
    for theta_star, fisher in state.anchors:
        if theta_star.size != theta.size:
            raise ValueError("anchor length does not match parameters")
        diff = theta - theta_star
        total += float(np.dot(fisher * diff, diff))
    return 0.5 * lam * total


def ewc_penalty_gradient(state: EwcState, theta, lam: float) -> np.ndarray:
    theta = _values(theta)
    grad = np.zeros_like(theta)
    for theta_star, fisher in state.anchors:
        if theta_star.size != theta.size:
            raise ValueError("anchor length does not match parameters")
        grad += fisher * (theta - theta_star)
    return lam * grad


def estimate_fisher(
    params: ParamVector,
    spec: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    budget: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Empirical Fisher diagonal: mean squared per-example CE gradient.

    Samples `budget` examples without replacement (all examples when the task
    is smaller than the budget).
    """
    if budget < 1:
        raise ValueError("fisher budget must be >= 1")
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot estimate Fisher on empty data")
    idx = np.arange(n) if budget >= n else np.sort(rng.choice(n, size=budget, replace=False))
    total = np.zeros(len(params))
    for i in idx:
        g = ndcore.backward(params, spec, x[i : i + 1], y[i : i + 1])
        total += g.values**2
    return total / idx.size


@dataclass
class SiState:
    """Path-integral importance accumulator.

    w tracks -g * dtheta during a task; consolidation folds max(0, w) damped
    by the squared task displacement into omega and re-anchors theta_ref.
    """

    xi: float = 0.1
    w: np.ndarray | None = None
    omega: np.ndarray | None = None
    theta_start: np.ndarray | None = None
    theta_ref: np.ndarray | None = None

    def begin_task(self, theta) -> None:
        theta = _values(theta)
        self.w = np.zeros_like(theta)
        self.theta_start = theta.copy()
        if self.theta_ref is None:
            self.theta_ref = theta.copy()


def si_update(state: SiState, grad, theta_before, theta_after) -> None:
    grad, before, after = _values(grad), _values(theta_before), _values(theta_after)
    if state.w is None:
        state.w = np.zeros_like(grad)
    if not grad.size == before.size == after.size == state.w.size:
        raise ValueError("si_update vectors must be congruent")
    state.w += -grad * (after - before)


def si_consolidate(state: SiState, theta_end) -> None:
    theta_end = _values(theta_end)
    if state.theta_start is None:
        state.theta_start = theta_end.copy()
    w = state.w if state.w is not None else np.zeros_like(theta_end)
    displacement = theta_end - state.theta_start
    increment = np.maximum(w, 0.0) / (displacement**2 + state.xi)
    if state.omega is None:
        state.omega = np.zeros_like(theta_end)
    state.omega += increment
    state.theta_ref = theta_end.copy()
    state.w = None
    state.theta_start = None


def si_penalty(state: SiState, theta, lam: float) -> float:
    """lam * sum omega_i (theta_i - theta_ref_i)^2."""
    if state.omega is None or state.theta_ref is None:
        return 0.0
    diff = _values(theta) - state.theta_ref
    return float(lam * np.dot(state.omega * diff, diff))


def si_penalty_gradient(state: SiState, theta, lam: float) -> np.ndarray | None:
    if state.omega is None or state.theta_ref is None:
        return None
    return 2.0 * lam * state.omega * (_values(theta) - state.theta_ref)


@dataclass(frozen=True)
class TeacherSnapshot:
    """Frozen pre-task model that supplies distillation targets."""

    params: ParamVector
    spec: ModelSpec

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return ndcore.forward(self.params, self.spec, batch)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def lwf_kd_loss(teacher_logits, student_logits, tau: float, alpha: float) -> float:
    """alpha * tau^2 * mean KL(softmax(teacher/tau) || softmax(student/tau))."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("teacher/student logits shapes differ")
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    log_p = _log_softmax(teacher_logits / tau)
    log_q = _log_softmax(student_logits / tau)
    kl = (np.exp(log_p) * (log_p - log_q)).sum(axis=1)
    return float(alpha * tau**2 * kl.mean())


def lwf_kd_dlogits(teacher_logits, student_logits, tau: float, alpha: float) -> np.ndarray:
    """Gradient of the batch-mean distillation loss w.r.t. student logits."""
    p = np.exp(_log_softmax(np.asarray(teacher_logits, dtype=np.float64) / tau))
    q = np.exp(_log_softmax(np.asarray(student_logits, dtype=np.float64) / tau))
    return alpha * tau * (q - p) / p.shape[0]


# ---------------------------------------------------------------------------
# Memory buffers


@dataclass
class MemoryBuffer:
    capacity: int
    policy: str  # "reservoir" | "class-balanced-greedy" | "per-task-ring"
    features: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    origins: list = field(default_factory=list)
    seen: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.features), np.asarray(self.labels, dtype=np.int64)

    def class_counts(self) -> dict:
        counts: dict = {}
        for label in self.labels:
            counts[label] = counts.get(label, 0) + 1
        return counts


def reservoir_insert(buffer: MemoryBuffer, feature, label, origin, rng) -> None:
    """Algorithm-R insert: after n >= capacity arrivals every sample has
    retention probability capacity/n."""
    if buffer.policy != "reservoir":
        raise ValueError("reservoir_insert needs a reservoir buffer")
    buffer.seen += 1
    if buffer.capacity == 0:
        return
    if len(buffer) < buffer.capacity:
        buffer.features.append(np.asarray(feature, dtype=np.float64))
        buffer.labels.append(int(label))
        buffer.origins.append(int(origin))
        return
    slot = int(rng.integers(0, buffer.seen))
    if slot < buffer.capacity:
        buffer.features[slot] = np.asarray(feature, dtype=np.float64)
        buffer.labels[slot] = int(label)
        buffer.origins[slot] = int(origin)


def gdumb_insert_balanced(buffer: MemoryBuffer, feature, label, origin, rng) -> None:
    """Greedy class-balancing insert: a full buffer accepts a sample only if
    its class is under-represented, evicting from the currently largest
    class."""
    if buffer.policy != "class-balanced-greedy":
        raise ValueError("gdumb_insert_balanced needs a class-balanced-greedy buffer")
    buffer.seen += 1
    if buffer.capacity == 0:
        return
    label = int(label)
    if len(buffer) < buffer.capacity:
        buffer.features.append(np.asarray(feature, dtype=np.float64))
        buffer.labels.append(label)
        buffer.origins.append(int(origin))
        return
    counts = buffer.class_counts()
    largest = max(counts.values())
    if counts.get(label, 0) >= largest:
        return
    victims = [c for c, n in counts.items() if n == largest]
    victim_class = victims[int(rng.integers(0, len(victims)))] if len(victims) > 1 else victims[0]
    slots = [i for i, c in enumerate(buffer.labels) if c == victim_class]
    slot = slots[int(rng.integers(0, len(slots)))]
    buffer.features[slot] = np.asarray(feature, dtype=np.float64)
    buffer.labels[slot] = label
    buffer.origins[slot] = int(origin)


# ---------------------------------------------------------------------------
# Gradient projections


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project g off the half-space violating the averaged reference gradient:
    g - (g.g_ref / g_ref.g_ref) g_ref when g.g_ref < 0, else g unchanged."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ValueError("gradient and reference must have equal length")
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    denom = float(g_ref @ g_ref)
    if denom == 0.0:
        # violated constraint with a zero reference cannot happen in exact
        # arithmetic; skip the projection rather than divide by zero
        return g
    return g - (dot / denom) * g_ref


@dataclass(frozen=True)
class GemResult:
    grad: np.ndarray
    projected: bool
    converged: bool
    iterations: int
    fallback: bool


def gem_project(
    g: np.ndarray,
    G: np.ndarray,
    tol: float = 1e-7,
    margin: float = 0.0,
    max_iter: int = 10000,
) -> GemResult:
    """Euclidean projection of g onto {x : <x, g_k> >= margin for all k}.

    Solves the nonnegative dual QP (min 1/2 v'GG'v + v'(Gg - margin)) by
    projected gradient descent with step 1/L, L the inf-norm bound on GG'.
    The dual gradient components are exactly the constraint values of the
    candidate projection, so feasibility is checked directly. On
    non-convergence, falls back to a single projection against the mean
    constraint row.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    g = np.asarray(g, dtype=np.float64)
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape[1] != g.size:
        raise ValueError("constraint rows must match gradient length")
    dots = G @ g
    if np.all(dots >= margin):
        return GemResult(g, False, True, 0, False)
    # row scaling leaves the feasible cone unchanged but conditions the dual;
    # margins rescale with their rows to keep the constraints identical
    norms = np.linalg.norm(G, axis=1)
    keep = norms > 0.0
    if not keep.any():
        return GemResult(g, False, False, 0, False)
    Gn = G[keep] / norms[keep, None]
    A = Gn @ Gn.T
    b = Gn @ g - margin / norms[keep]
    L = float(np.abs(A).sum(axis=1).max())
    scale = max(1.0, float(np.abs(b).max()))
    row_norms = norms[keep]
    v = np.zeros(Gn.shape[0])
    converged = False
    iterations = 0
    for iterations in range(max_iter + 1):
        dual_grad = A @ v + b  # = <g + Gn'v, g_k/|g_k|> - margin/|g_k|
        raw_violation = float((dual_grad * row_norms).min())  # = min <x, g_k> - margin
        if raw_violation >= -0.5 * tol and np.abs(v * dual_grad).max() <= tol * scale:
            converged = True  # epsilon-KKT: feasible and complementary
            break
        if iterations == max_iter:
            break
        v = np.maximum(0.0, v - dual_grad / L)
    projected = g + Gn.T @ v
    if converged:
        return GemResult(projected, True, True, iterations, False)
    if float((G @ projected).min()) >= margin - tol:
        # ran out of iterations but the iterate is already feasible; keep it
        return GemResult(projected, True, False, iterations, False)
    fallback = agem_project(g, G.mean(axis=0))
    return GemResult(fallback, True, False, iterations, True)


# ---------------------------------------------------------------------------
# Strategy plugins


class Strategy:
    """Plain fine-tuning on the current task; subclasses add their extras."""

    def __init__(self, config: StrategyConfig, spec: ModelSpec, master_seed: int):
        self.config = config
        self.spec = spec
        self.rngs = RngBundle(master_seed)
        self.completed = 0
        self.diagnostics: dict = {}
        self._cfg: TrainConfig | None = None

    @property
    def kind(self) -> str:
        return self.config.kind

    def allowed_tasks(self, t: int, n_tasks: int) -> set[int]:
        return {t}

    # --- hooks -------------------------------------------------------------

    def initial_params(self, model: Model, t: int) -> ParamVector:
        return model.params

    def session_data(self, access: StreamAccess, t: int):
        return access.train(t)

    def before_session(self, params: ParamVector, access: StreamAccess, t: int) -> None:
        pass

    def extend_batch(self, bx: np.ndarray, by: np.ndarray):
        return bx, by

    def loss_dlogits(self, logits: np.ndarray, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
        return ndcore.ce_dlogits(logits, by)

    def penalty_gradient(self, params: ParamVector) -> np.ndarray | None:
        return None

    def adjust_gradient(self, grad: ParamVector, params: ParamVector, t: int) -> ParamVector:
        return grad

    def after_step(self, grad_values, before_values, after_values) -> None:
        pass

    def after_session(self, params: ParamVector, access: StreamAccess, t: int) -> None:
        pass

    def shuffle_key(self, t: int) -> int:
        return t

    # --- shared session loop -----------------------------------------------

    def train_session(self, model: Model, access: StreamAccess, t: int, cfg: TrainConfig) -> ParamVector:
        self._cfg = cfg
        x, y = self.session_data(access, t)
        params = self.initial_params(model, t).copy()
        self.before_session(params, access, t)
        n = x.shape[0]
        adam = AdamState.fresh(len(params), cfg.learning_rate)
        for epoch in range(cfg.epochs):
            order = self.rngs.shuffle_rng(self.shuffle_key(t), epoch).permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                bx, by = x[idx], y[idx]
                bx, by = self.extend_batch(bx, by)
                logits = ndcore.forward(params, self.spec, bx)
                d = self.loss_dlogits(logits, bx, by)
                grad = ndcore.backward_from_dlogits(params, self.spec, bx, d)
                extra = self.penalty_gradient(params)
                if extra is not None:
                    grad = ParamVector(grad.values + extra, grad.layout)
                grad = self.adjust_gradient(grad, params, t)
                before = params.values
                params, adam = ndcore.adam_step(adam, params, grad)
                self.after_step(grad.values, before, params.values)
        self.after_session(params, access, t)
        return params

    # --- serialization -----------------------------------------------------

    def state_sections(self) -> list[tuple[str, bytes]]:
        return [("progress", json.dumps({"completed": self.completed}).encode())]

    def load_sections(self, sections: dict) -> None:
        if "progress" in sections:
            self.completed = json.loads(sections["progress"].decode())["completed"]


class NaiveStrategy(Strategy):
    pass


class CumulativeStrategy(Strategy):
    """From-scratch retraining on the union of all tasks seen so far."""

    def allowed_tasks(self, t, n_tasks):
        return set(range(1, t + 1))

    def initial_params(self, model, t):
        return ndcore.init_params(self.spec, self.rngs.init_rng())

    def session_data(self, access, t):
        parts = [access.train(k) for k in range(1, t + 1)]
        return np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class JointStrategy(Strategy):
    """One offline session over every task's training data."""

    def allowed_tasks(self, t, n_tasks):
        return set(range(1, n_tasks + 1))

    def session_data(self, access, t):
        parts = [access.train(k) for k in range(1, access.n_tasks + 1)]
        return np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class EwcStrategy(Strategy):
    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self.state = EwcState()

    def penalty_gradient(self, params):
        if self.config.lam == 0.0 or not self.state.anchors:
            return None
        return ewc_penalty_gradient(self.state, params, self.config.lam)

    def after_session(self, params, access, t):
        if self.config.lam == 0.0:
            return
        x, y = access.train(t)
        fisher = estimate_fisher(params, self.spec, x, y, self.config.fisher_budget, self.rngs.fisher)
        self.state.add(params, fisher)

    def state_sections(self):
        sections = super().state_sections()
        arrays = {}
        for k, (theta_star, fisher) in enumerate(self.state.anchors):
            arrays[f"theta_{k}"] = theta_star
            arrays[f"fisher_{k}"] = fisher
        sections.append(("ewc.anchors", _npz_bytes(arrays)))
        return sections

    def load_sections(self, sections):
        super().load_sections(sections)
        arrays = _npz_load(sections["ewc.anchors"])
        self.state = EwcState()
        k = 0
        while f"theta_{k}" in arrays:
            self.state.add(arrays[f"theta_{k}"], arrays[f"fisher_{k}"])
            k += 1


class SiStrategy(Strategy):
    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self.state = SiState(xi=config.xi)

    def before_session(self, params, access, t):
        if self.config.lam > 0.0:
            self.state.begin_task(params)

    def after_step(self, grad_values, before_values, after_values):
        if self.config.lam > 0.0:
            si_update(self.state, grad_values, before_values, after_values)

    def penalty_gradient(self, params):
        if self.config.lam == 0.0:
            return None
        return si_penalty_gradient(self.state, params, self.config.lam)

    def after_session(self, params, access, t):
        if self.config.lam > 0.0:
            si_consolidate(self.state, params)

    def state_sections(self):
        sections = super().state_sections()
        arrays = {}
        for name in ("w", "omega", "theta_start", "theta_ref"):
            value = getattr(self.state, name)
            if value is not None:
                arrays[name] = value
        sections.append(("si.state", _npz_bytes(arrays)))
        return sections

    def load_sections(self, sections):
        super().load_sections(sections)
        arrays = _npz_load(sections["si.state"])
        self.state = SiState(xi=self.config.xi)
        for name, value in arrays.items():
            setattr(self.state, name, value)


class LwfStrategy(Strategy):
    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self.teacher: TeacherSnapshot | None = None

    def before_session(self, params, access, t):
        # no teacher for the first task: there is nothing to distill yet
        if self.config.alpha > 0.0 and t >= 2:
            self.teacher = TeacherSnapshot(params.copy(), self.spec)

    def loss_dlogits(self, logits, bx, by):
        d = ndcore.ce_dlogits(logits, by)
        if self.teacher is not None and self.config.alpha > 0.0:
            teacher_logits = self.teacher.logits(bx)
            d = d + lwf_kd_dlogits(teacher_logits, logits, self.config.tau, self.config.alpha)
        return d

    def state_sections(self):
        sections = super().state_sections()
        if self.teacher is not None:
            sections.append(("lwf.teacher", ndcore.params_to_bytes(self.teacher.params)))
        return sections

    def load_sections(self, sections):
        super().load_sections(sections)
        if "lwf.teacher" in sections:
            self.teacher = TeacherSnapshot(ndcore.params_from_bytes(sections["lwf.teacher"]), self.spec)


class _BufferedStrategy(Strategy):
    policy = "reservoir"

    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self.buffer = MemoryBuffer(capacity=config.memory_size, policy=self.policy)

    def state_sections(self):
        sections = super().state_sections()
        x, y = self.buffer.arrays() if len(self.buffer) else (np.zeros((0, 1)), np.zeros(0, dtype=np.int64))
        sections.append(
            (
                "memory.buffer",
                _npz_bytes(
                    {
                        "features": x,
                        "labels": y,
                        "origins": np.asarray(self.buffer.origins, dtype=np.int64),
                        "seen": np.asarray([self.buffer.seen]),
                    }
                ),
            )
        )
        return sections

    def load_sections(self, sections):
        super().load_sections(sections)
        arrays = _npz_load(sections["memory.buffer"])
        self.buffer = MemoryBuffer(capacity=self.config.memory_size, policy=self.policy)
        self.buffer.features = [row for row in arrays["features"]]
        self.buffer.labels = [int(v) for v in arrays["labels"]]
        self.buffer.origins = [int(v) for v in arrays["origins"]]
        self.buffer.seen = int(arrays["seen"][0])


class ReplayStrategy(_BufferedStrategy):
    """Each step trains on the current batch plus a uniform memory draw."""

    policy = "reservoir"

    def extend_batch(self, bx, by):
        if len(self.buffer) == 0:
            return bx, by
        k = min(self._cfg.batch_size, len(self.buffer))
        idx = self.rngs.memory.choice(len(self.buffer), size=k, replace=False)
        mem_x = np.stack([self.buffer.features[i] for i in idx])
        mem_y = np.asarray([self.buffer.labels[i] for i in idx], dtype=np.int64)
        return np.vstack([bx, mem_x]), np.concatenate([by, mem_y])

    def after_session(self, params, access, t):
        if self.buffer.capacity == 0:
            return
        x, y = access.train(t)
        for i in range(x.shape[0]):
            reservoir_insert(self.buffer, x[i], y[i], t, self.rngs.memory)
        self.diagnostics.setdefault("buffer_size", []).append(len(self.buffer))


class GDumbStrategy(_BufferedStrategy):
    """Greedy balanced sampler plus a learner retrained from scratch on the
    buffer each session."""

    policy = "class-balanced-greedy"

    def initial_params(self, model, t):
        return ndcore.init_params(self.spec, self.rngs.init_rng())

    def shuffle_key(self, t):
        # training depends only on buffer contents + seed, not the session id
        return 0

    def session_data(self, access, t):
        x, y = access.train(t)
        for i in range(x.shape[0]):
            gdumb_insert_balanced(self.buffer, x[i], y[i], t, self.rngs.memory)
        self.diagnostics.setdefault("buffer_size", []).append(len(self.buffer))
        if len(self.buffer) == 0:
            return np.zeros((0, self.spec.input_dim)), np.zeros(0, dtype=np.int64)
        return self.buffer.arrays()


class _EpisodicStrategy(Strategy):
    """Shared per-task ring memory for the gradient-constraint regimes."""

    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self.memories: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def after_session(self, params, access, t):
        if self.config.per_task_memory == 0:
            return
        x, y = access.train(t)
        keep = self.config.per_task_memory
        self.memories[t] = (x[-keep:].copy(), y[-keep:].copy())

    def _memory_tasks(self, t: int) -> list[int]:
        return sorted(k for k in self.memories if k < t)

    def state_sections(self):
        sections = super().state_sections()
        arrays = {}
        for k, (x, y) in self.memories.items():
            arrays[f"x_{k}"] = x
            arrays[f"y_{k}"] = y
        sections.append(("episodic.memories", _npz_bytes(arrays)))
        return sections

    def load_sections(self, sections):
        super().load_sections(sections)
        arrays = _npz_load(sections["episodic.memories"])
        self.memories = {}
        for name, value in arrays.items():
            if name.startswith("x_"):
                k = int(name[2:])
                self.memories[k] = (value, arrays[f"y_{k}"])


class GemStrategy(_EpisodicStrategy):
    """Per-step projection keeping the update non-harmful to every past task."""

    def adjust_gradient(self, grad, params, t):
        past = self._memory_tasks(t)
        if not past:
            return grad
        rows = np.stack(
            [ndcore.backward(params, self.spec, *self.memories[k]).values for k in past]
        )
        result = gem_project(grad.values, rows, margin=self.config.gamma)
        if result.projected:
            self.diagnostics["projections"] = self.diagnostics.get("projections", 0) + 1
        if result.fallback:
            self.diagnostics["fallbacks"] = self.diagnostics.get("fallbacks", 0) + 1
        if not result.projected:
            return grad
        return ParamVector(result.grad, grad.layout)


class AgemStrategy(_EpisodicStrategy):
    """Single-constraint variant: one averaged reference gradient per step."""

    def __init__(self, config, spec, master_seed):
        super().__init__(config, spec, master_seed)
        self._pool = None  # concatenated past-task memories, fixed per session

    def before_session(self, params, access, t):
        past = self._memory_tasks(t)
        if past:
            self._pool = (
                np.vstack([self.memories[k][0] for k in past]),
                np.concatenate([self.memories[k][1] for k in past]),
            )
        else:
            self._pool = None

    def adjust_gradient(self, grad, params, t):
        if self._pool is None:
            return grad
        pool_x, pool_y = self._pool
        k = min(self._cfg.batch_size, pool_x.shape[0])
        idx = self.rngs.memory.choice(pool_x.shape[0], size=k, replace=False)
        g_ref = ndcore.backward(params, self.spec, pool_x[idx], pool_y[idx]).values
        if float(grad.values @ g_ref) >= 0.0:
            return grad
        self.diagnostics["projections"] = self.diagnostics.get("projections", 0) + 1
        return ParamVector(agem_project(grad.values, g_ref), grad.layout)


_STRATEGIES = {
    "Naive": NaiveStrategy,
    "Cumulative": CumulativeStrategy,
    "Joint": JointStrategy,
    "EWC": EwcStrategy,
    "LwF": LwfStrategy,
    "SI": SiStrategy,
    "Replay": ReplayStrategy,
    "GDumb": GDumbStrategy,
    "GEM": GemStrategy,
    "AGEM": AgemStrategy,
}


def make_strategy(config: StrategyConfig, spec: ModelSpec, master_seed: int) -> Strategy:
    return _STRATEGIES[config.kind](config, spec, master_seed)


def train_task(strategy: Strategy, model: Model, data, t: int, cfg: TrainConfig) -> Model:
    """Run training session t and return the updated model.

    Sessions are strictly sequential; the access audit rejects a session that
    pulled train data from tasks outside the strategy's declared set.
    """
    if t != strategy.completed + 1:
        raise SessionOrderError(
            f"session {t} out of order: {strategy.completed} sessions completed"
        )
    access = StreamAccess.from_stream(data) if isinstance(data, TaskStream) else data
    access.begin_session(t)
    params = strategy.train_session(model, access, t, cfg)
    touched = access.accessed_in(t)
    allowed = strategy.allowed_tasks(t, access.n_tasks)
    if not touched <= allowed:
        raise AccessViolation(
            f"{strategy.kind} session {t} accessed tasks {sorted(touched - allowed)} "
            f"outside its allowed set {sorted(allowed)}"
        )
    strategy.completed = t
    return Model(spec=model.spec, params=params)


# ---------------------------------------------------------------------------
# State snapshot serialization: tagged sections


def _npz_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _npz_load(blob: bytes) -> dict:
    with np.load(io.BytesIO(blob)) as data:
        return {name: data[name] for name in data.files}


def save_strategy_state(strategy: Strategy, path) -> None:
    sections = strategy.state_sections()
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<I", len(sections)))
        for tag, payload in sections:
            encoded = tag.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_strategy_state(strategy: Strategy, path) -> None:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != STATE_MAGIC:
        raise ValueError("bad strategy state magic")
    (n_sections,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    sections = {}
    for _ in range(n_sections):
        (tag_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        tag = blob[pos : pos + tag_len].decode("utf-8")
        pos += tag_len
        (payload_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        sections[tag] = blob[pos : pos + payload_len]
        pos += payload_len
    strategy.load_sections(sections)
