"""
Lightweight step-difficulty estimator: a single-layer GRU over fused step
feature vectors with a sigmoid scalar head.

The recurrence, for input z_t and hidden state h_{t-1} (h_0 = 0):

    u_t = sigmoid(W_u [z_t; h_{t-1}] + b_u)        update gate
    r_t = sigmoid(W_r [z_t; h_{t-1}] + b_r)        reset gate
    c_t = tanh(W_c [z_t; r_t * h_{t-1}] + b_c)     candidate state
    h_t = u_t * h_{t-1} + (1 - u_t) * c_t
    v_t = sigmoid(w . h_t + b)

v_t estimates the probability that the step keeps the solution on track;
the difficulty score used by the controller is its complement 1 - v_t.

Training distills soft teacher probabilities with binary cross-entropy,
backpropagation through time over whole trajectories, and Adam updates.
All math is numpy; trajectories are batched with end padding and a loss
mask, which is safe because the recurrence is causal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import StepFeatureVector, UNC_DIM, Z_DIM

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_HIDDEN_DIM = 96
BCE_EPS = 1e-7          # clamp for v before the logs
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Fixed constants of the synthetic teacher oracle.
TEACHER_MEAN_WEIGHT = 3.0    # weight on the mean of the uncertainty block
TEACHER_WALK_WEIGHT = 1.0    # weight on the latent walk
TEACHER_WALK_DECAY = 0.9     # mean reversion of the walk
TEACHER_WALK_STD = 0.1       # per-step walk noise

_PARAM_KEYS = (
    "update_w", "update_b",
    "reset_w", "reset_b",
    "cand_w", "cand_b",
    "head_w", "head_b",
)

__all__ = [
    "PilotModel",
    "PilotSession",
    "TrainSample",
    "TrainConfig",
    "DimensionMismatch",
    "EmptyDataset",
    "UnsupportedVersion",
    "CorruptCheckpoint",
    "difficulty",
    "bce_loss",
    "train",
    "synth_teacher",
    "teacher_score",
    "make_synth_dataset",
    "save",
    "load",
    "save_checkpoint",
    "load_checkpoint",
    "ConstantDifficultyPilot",
    "ScriptedDifficultyPilot",
    "DEFAULT_HIDDEN_DIM",
]


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_vector(item) -> np.ndarray:
    """StepFeatureVector (anything with .z) or a raw vector."""
    return np.asarray(getattr(item, "z", item), dtype=np.float64)


def _as_matrix(trajectory, input_dim: int) -> np.ndarray:
    """Stack a trajectory of StepFeatureVector (or raw vectors) to (T, D)."""
    rows = []
    for item in trajectory:
        z = _as_vector(item)
        if z.shape != (input_dim,):
            raise DimensionMismatch(
                f"step vector has shape {z.shape}, model expects ({input_dim},)")
        rows.append(z)
    if not rows:
        return np.zeros((0, input_dim))
    return np.stack(rows)


class PilotModel:
    """GRU weights plus the scalar head. Read-only during inference, so a
    single loaded model may serve many concurrent sessions."""

    def __init__(self, params: dict[str, np.ndarray], input_dim: int, hidden_dim: int):
        self.params = params
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim

    @classmethod
    def init_random(cls, input_dim: int = Z_DIM,
                    hidden_dim: int = DEFAULT_HIDDEN_DIM,
                    seed: int = 0) -> "PilotModel":
        """Seeded uniform init in +-1/sqrt(hidden_dim) for every parameter."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden_dim)
        cat = input_dim + hidden_dim

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        params = {
            "update_w": u(hidden_dim, cat), "update_b": u(hidden_dim),
            "reset_w": u(hidden_dim, cat), "reset_b": u(hidden_dim),
            "cand_w": u(hidden_dim, cat), "cand_b": u(hidden_dim),
            "head_w": u(hidden_dim), "head_b": u(1),
        }
        return cls(params, input_dim, hidden_dim)

    @classmethod
    def zeros(cls, input_dim: int = Z_DIM,
              hidden_dim: int = DEFAULT_HIDDEN_DIM) -> "PilotModel":
        cat = input_dim + hidden_dim
        params = {
            "update_w": np.zeros((hidden_dim, cat)), "update_b": np.zeros(hidden_dim),
            "reset_w": np.zeros((hidden_dim, cat)), "reset_b": np.zeros(hidden_dim),
            "cand_w": np.zeros((hidden_dim, cat)), "cand_b": np.zeros(hidden_dim),
            "head_w": np.zeros(hidden_dim), "head_b": np.zeros(1),
        }
        return cls(params, input_dim, hidden_dim)

    def copy(self) -> "PilotModel":
        return PilotModel({k: v.copy() for k, v in self.params.items()},
                          self.input_dim, self.hidden_dim)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def new_session(self) -> "PilotSession":
        return PilotSession(self)

    def forward(self, trajectory) -> list[float]:
        """Score a whole trajectory; output length equals input length."""
        session = self.new_session()
        zs = _as_matrix(trajectory, self.input_dim)
        return [session.step(z) for z in zs]


class PilotSession:
    """Incremental scorer carrying the hidden state of one session.

    Because the recurrence is causal, stepping a session is equivalent to
    re-running forward() on the growing prefix, at constant cost per step.
    """

    def __init__(self, model: PilotModel):
        self.model = model
        self.h = np.zeros(model.hidden_dim)

    def step(self, z) -> float:
        z = _as_vector(z)
        if z.shape != (self.model.input_dim,):
            raise DimensionMismatch(
                f"step vector has shape {z.shape}, model expects ({self.model.input_dim},)")
        p = self.model.params
        cat = np.concatenate([z, self.h])
        u = _sigmoid(p["update_w"] @ cat + p["update_b"])
        r = _sigmoid(p["reset_w"] @ cat + p["reset_b"])
        cat_c = np.concatenate([z, r * self.h])
        c = np.tanh(p["cand_w"] @ cat_c + p["cand_b"])
        self.h = u * self.h + (1.0 - u) * c
        logit = float(p["head_w"] @ self.h + p["head_b"][0])
        return float(_sigmoid(logit))


def difficulty(v: float) -> float:
    """Difficulty is the complement of the predicted success probability."""
    return 1.0 - v


def bce_loss(v: float, v_star: float) -> float:
    v = min(max(v, BCE_EPS), 1.0 - BCE_EPS)
    return -(v_star * math.log(v) + (1.0 - v_star) * math.log(1.0 - v))


@dataclass
class TrainSample:
    """One trajectory with its soft teacher targets."""

    trajectory: list[StepFeatureVector]
    targets: list[float]

    def __post_init__(self):
        if len(self.trajectory) != len(self.targets):
            raise ValueError("trajectory and targets must have equal length")
        for t in self.targets:
            if not (0.0 <= t <= 1.0):
                raise ValueError(f"target {t} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "trajectory": [s.to_dict() for s in self.trajectory],
            "targets": list(self.targets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSample":
        return cls(
            trajectory=[StepFeatureVector.from_dict(s) for s in d["trajectory"]],
            targets=[float(t) for t in d["targets"]],
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    patience: int = 0     # epochs without improvement before stopping; 0 disables

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _forward_batch(params, Z):
    """Run the recurrence over Z (B, T, D). Returns per-step probabilities
    V (B, T), hidden states H (B, T+1, Hd) and gate caches for backprop."""
    B, T, _ = Z.shape
    Hd = params["update_b"].shape[0]
    H = np.zeros((B, T + 1, Hd))
    U = np.zeros((B, T, Hd))
    R = np.zeros((B, T, Hd))
    C = np.zeros((B, T, Hd))
    h = H[:, 0]
    for t in range(T):
        cat = np.concatenate([Z[:, t], h], axis=1)
        u = _sigmoid(cat @ params["update_w"].T + params["update_b"])
        r = _sigmoid(cat @ params["reset_w"].T + params["reset_b"])
        cat_c = np.concatenate([Z[:, t], r * h], axis=1)
        c = np.tanh(cat_c @ params["cand_w"].T + params["cand_b"])
        h = u * h + (1.0 - u) * c
        U[:, t], R[:, t], C[:, t] = u, r, c
        H[:, t + 1] = h
    logits = H[:, 1:] @ params["head_w"] + params["head_b"][0]
    V = _sigmoid(logits)
    return V, H, (U, R, C)


def loss_and_grads(params, Z, targets, mask):
    """Mean masked BCE over the batch plus gradients for every parameter.

    Z: (B, T, D) end-padded inputs; targets, mask: (B, T). Padding carries
    mask 0 and contributes nothing, which is exact because padding sits at
    the end of each trajectory and the recurrence is causal.
    """
    B, T, D = Z.shape
    V, H, (U, R, C) = _forward_batch(params, Z)

    n_valid = float(mask.sum())
    if n_valid == 0:
        raise EmptyDataset("batch contains no valid steps")
    Vc = np.clip(V, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(targets * np.log(Vc) + (1.0 - targets) * np.log(1.0 - Vc))
    loss = float((losses * mask).sum() / n_valid)

    # d loss / d logit; zero where the clamp is active (clip has zero slope).
    live = (V > BCE_EPS) & (V < 1.0 - BCE_EPS)
    dlogit = np.where(live, V - targets, 0.0) * mask / n_valid

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["head_w"] = np.einsum("bt,bth->h", dlogit, H[:, 1:])
    grads["head_b"] = np.array([dlogit.sum()])

    gH = np.zeros((B, params["update_b"].shape[0]))
    for t in range(T - 1, -1, -1):
        h_prev = H[:, t]
        gH = gH + dlogit[:, t:t + 1] * params["head_w"][None, :]
        u, r, c = U[:, t], R[:, t], C[:, t]

        dU = gH * (h_prev - c)
        dC = gH * (1.0 - u)
        da_c = dC * (1.0 - c * c)
        cat_c = np.concatenate([Z[:, t], r * h_prev], axis=1)
        grads["cand_w"] += da_c.T @ cat_c
        grads["cand_b"] += da_c.sum(axis=0)
        dcat_c = da_c @ params["cand_w"]
        dRh = dcat_c[:, D:]

        dR = dRh * h_prev
        da_r = dR * r * (1.0 - r)
        da_u = dU * u * (1.0 - u)
        cat = np.concatenate([Z[:, t], h_prev], axis=1)
        grads["update_w"] += da_u.T @ cat
        grads["update_b"] += da_u.sum(axis=0)
        grads["reset_w"] += da_r.T @ cat
        grads["reset_b"] += da_r.sum(axis=0)

        gH = (gH * u + dRh * r
              + (da_u @ params["update_w"])[:, D:]
              + (da_r @ params["reset_w"])[:, D:])
    return loss, grads


def _pack_batch(samples: list[TrainSample], input_dim: int):
    B = len(samples)
    T = max(len(s.targets) for s in samples)
    Z = np.zeros((B, T, input_dim))
    targets = np.zeros((B, T))
    mask = np.zeros((B, T))
    for i, s in enumerate(samples):
        zs = _as_matrix(s.trajectory, input_dim)
        n = zs.shape[0]
        Z[i, :n] = zs
        targets[i, :n] = s.targets
        mask[i, :n] = 1.0
    return Z, targets, mask


def train(model: PilotModel, data: list[TrainSample],
          cfg: TrainConfig) -> tuple[PilotModel, list[float]]:
    """Distill the teacher targets into a copy of the model.

    Returns the trained copy and the per-epoch mean training loss. With
    epochs 0 the returned parameters are bit-identical to the input.
    Deterministic for a fixed seed.
    """
    if not data:
        raise EmptyDataset("no training samples")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0

    history: list[float] = []
    best = math.inf
    stall = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        epoch_steps = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[lo:lo + cfg.batch_size]]
            Z, targets, mask = _pack_batch(batch, model.input_dim)
            loss, grads = loss_and_grads(model.params, Z, targets, mask)
            n_valid = float(mask.sum())
            epoch_loss += loss * n_valid
            epoch_steps += n_valid

            step += 1
            bc1 = 1.0 - ADAM_BETA1 ** step
            bc2 = 1.0 - ADAM_BETA2 ** step
            for k in _PARAM_KEYS:
                g = grads[k]
                m_state[k] = ADAM_BETA1 * m_state[k] + (1.0 - ADAM_BETA1) * g
                v_state[k] = ADAM_BETA2 * v_state[k] + (1.0 - ADAM_BETA2) * g * g
                model.params[k] -= cfg.learning_rate * (
                    (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + ADAM_EPS))

        epoch_mean = epoch_loss / epoch_steps
        history.append(epoch_mean)
        if cfg.patience > 0:
            if epoch_mean < best - 1e-6:
                best = epoch_mean
                stall = 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
    return model, history


def teacher_score(mean_unc: float, walk: float) -> float:
    """Core formula of the synthetic teacher oracle."""
    return float(_sigmoid(TEACHER_MEAN_WEIGHT * mean_unc + TEACHER_WALK_WEIGHT * walk))


def synth_teacher(trajectory, seed: int) -> list[float]:
    """Desk-scale stand-in for a heavyweight teacher scorer.

    Each target combines the mean of the step's uncertainty block with a
    seeded mean-reverting random walk, squashed through a sigmoid, so the
    targets are smooth in t, strictly inside (0, 1), and mostly but not
    fully predictable from the features.
    """
    rng = np.random.default_rng(seed)
    walk = 0.0
    out = []
    for item in trajectory:
        z = _as_vector(item)
        walk = TEACHER_WALK_DECAY * walk + rng.normal(0.0, TEACHER_WALK_STD)
        out.append(teacher_score(float(z[:UNC_DIM].mean()), walk))
    return out


def make_synth_dataset(n_trajectories: int, seed: int = 0,
                       min_len: int = 8, max_len: int = 24) -> list[TrainSample]:
    """Deterministic synthetic corpus: standardized feature trajectories
    with targets from the synthetic teacher."""
    from .features import from_parts, SEM_DIM

    seeds = np.random.SeedSequence(seed).spawn(n_trajectories)
    samples = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        T = int(rng.integers(min_len, max_len + 1))
        h_unc = rng.standard_normal((T, UNC_DIM))
        h_sem = rng.standard_normal((T, SEM_DIM))
        h_sem /= np.linalg.norm(h_sem, axis=1, keepdims=True)
        traj = [from_parts(h_unc[t], h_sem[t]) for t in range(T)]
        targets = synth_teacher(traj, int(rng.integers(2 ** 62)))
        samples.append(TrainSample(trajectory=traj, targets=targets))
    return samples


# Checkpoint format: JSON, UTF-8, row-major float arrays. The JSON float
# representation round-trips IEEE doubles exactly, so reloads are bit-exact.

_GATE_TO_KEY = {"update": "update", "reset": "reset", "candidate": "cand"}


def save(model: PilotModel, seed: int | None = None,
         loss_history: list[float] | None = None) -> dict:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hidden_dim": model.hidden_dim,
        "params": {},
        "meta": {"seed": seed, "loss_history": list(loss_history or [])},
    }
    for gate, key in _GATE_TO_KEY.items():
        doc["params"][gate] = {
            "weight": model.params[f"{key}_w"].ravel().tolist(),
            "bias": model.params[f"{key}_b"].tolist(),
        }
    doc["params"]["head"] = {
        "weight": model.params["head_w"].tolist(),
        "bias": model.params["head_b"].tolist(),
    }
    return doc


def load(checkpoint: dict) -> PilotModel:
    try:
        version = checkpoint["format_version"]
    except (TypeError, KeyError):
        raise CorruptCheckpoint("missing format_version") from None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise UnsupportedVersion(
            f"checkpoint format {version!r} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    try:
        hidden_dim = int(checkpoint["hidden_dim"])
        gates = checkpoint["params"]
        flat = np.asarray(gates["update"]["weight"], dtype=np.float64)
        if hidden_dim < 1 or flat.size % hidden_dim != 0:
            raise CorruptCheckpoint("update gate size inconsistent with hidden_dim")
        cat = flat.size // hidden_dim
        input_dim = cat - hidden_dim
        if input_dim < 1:
            raise CorruptCheckpoint("implied input_dim is not positive")
        params = {}
        for gate, key in _GATE_TO_KEY.items():
            w = np.asarray(gates[gate]["weight"], dtype=np.float64)
            b = np.asarray(gates[gate]["bias"], dtype=np.float64)
            if w.size != hidden_dim * cat or b.shape != (hidden_dim,):
                raise CorruptCheckpoint(f"{gate} gate arrays have wrong size")
            params[f"{key}_w"] = w.reshape(hidden_dim, cat)
            params[f"{key}_b"] = b
        head_w = np.asarray(gates["head"]["weight"], dtype=np.float64)
        head_b = np.asarray(gates["head"]["bias"], dtype=np.float64)
        if head_w.shape != (hidden_dim,) or head_b.shape != (1,):
            raise CorruptCheckpoint("head arrays have wrong size")
        params["head_w"] = head_w
        params["head_b"] = head_b
    except CorruptCheckpoint:
        raise
    except (TypeError, KeyError, ValueError) as e:
        raise CorruptCheckpoint(f"malformed checkpoint: {e}") from None
    return PilotModel(params, input_dim, hidden_dim)


def save_checkpoint(model: PilotModel, path: str | Path,
                    seed: int | None = None,
                    loss_history: list[float] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(save(model, seed=seed, loss_history=loss_history), f)
        f.write("\n")


def load_checkpoint(path: str | Path) -> PilotModel:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable checkpoint {path}: {e}") from None
    return load(doc)


class _FixedSession:
    def __init__(self, values):
        self._values = values
        self._i = 0

    def step(self, z) -> float:
        v = self._values[min(self._i, len(self._values) - 1)]
        self._i += 1
        return v


class ConstantDifficultyPilot:
    """Stub scorer pinning the difficulty to one value, for forcing states."""

    def __init__(self, difficulty_score: float):
        if not (0.0 <= difficulty_score <= 1.0):
            raise ValueError("difficulty must be in [0, 1]")
        self.v = 1.0 - difficulty_score

    def new_session(self):
        return _FixedSession([self.v])

    def forward(self, trajectory) -> list[float]:
        return [self.v for _ in trajectory]


class ScriptedDifficultyPilot:
    """Stub scorer replaying a fixed difficulty profile; the last value
    repeats once the profile is exhausted."""

    def __init__(self, difficulties: list[float]):
        if not difficulties:
            raise ValueError("difficulty profile must be non-empty")
        for r in difficulties:
            if not (0.0 <= r <= 1.0):
                raise ValueError(f"difficulty {r} outside [0, 1]")
        self.values = [1.0 - r for r in difficulties]

    def new_session(self):
        return _FixedSession(list(self.values))

    def forward(self, trajectory) -> list[float]:
        s = self.new_session()
        return [s.step(z) for z in trajectory]
