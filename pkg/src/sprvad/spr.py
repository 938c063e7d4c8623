"""Self-paced refinement: adaptive thresholds, closed-form sample weights and
the warm-up-then-refine training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .ingest import PARADIGMS, apply_paradigm
from .nn import Adam, Autoencoder, per_sample_loss, weighted_backward_step

log = logging.getLogger(__name__)

# batches whose loss spread is below this fraction of the mean count as constant
CONSTANT_BATCH_RTOL = 1e-6


@dataclass
class PaceState:
    t: int = 0
    r: float = 0.005
    start_coeff: float = 4.0
    lam: float = math.nan
    lam_prime: float = math.nan

    @property
    def rho(self) -> float:
        if not self.lam > self.lam_prime:
            return math.nan
        return self.lam * self.lam_prime / (self.lam - self.lam_prime)


@dataclass
class TrainConfig:
    n: int = 256
    T: int = 30
    T_prime: int = 5
    r: float = 0.005
    seed: int = 0
    paradigm: str = "REC"
    mode: str = "partial"
    pace_start_coeff: float = 4.0

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigurationError(f"batch size n must be >= 1, got {self.n}")
        if not (self.T >= self.T_prime >= 0 and self.T >= 1):
            raise ConfigurationError(f"need T >= T_prime >= 0 and T >= 1, got T={self.T}, T_prime={self.T_prime}")
        if self.r <= 0:
            raise ConfigurationError(f"shrink rate r must be positive, got {self.r}")
        if self.paradigm.upper() not in PARADIGMS:
            raise ConfigurationError(f"unknown paradigm {self.paradigm!r}")
        if self.mode not in ("partial", "merge"):
            raise ConfigurationError(f"mode must be partial or merge, got {self.mode!r}")


def batch_stats(losses) -> tuple[float, float]:
    """Mean and population standard deviation."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ConfigurationError("batch_stats of an empty loss vector")
    return float(losses.mean()), float(losses.std())


def pace_thresholds(losses, t: int, r: float, start_coeff: float = 4.0) -> tuple[float, float]:
    """Upper and lower thresholds ``(lambda, lambda_prime)`` for iteration t.

    The lower threshold is mean + std of the batch; the upper one starts at
    mean + 4 std and shrinks by ``r`` std per iteration until it meets the
    lower one.
    """
    mu, sigma = batch_stats(losses)
    lam_prime = mu + sigma
    lam = max(mu + (start_coeff - t * r) * sigma, lam_prime)
    return lam, lam_prime


def solve_weights(losses, lam: float, lam_prime: float) -> np.ndarray:
    """Closed-form minimiser of the mixture self-paced objective.

    Weight 1 at or below ``lam_prime``, 0 at or above ``lam`` and
    ``rho / L - lam_prime / (lam - lam_prime)`` in between.  When the two
    thresholds coincide the middle band is empty and ties keep weight 1.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if (losses < 0).any():
        raise ConfigurationError("reconstruction losses cannot be negative")
    v = np.zeros_like(losses)
    keep = losses <= lam_prime
    v[keep] = 1.0
    if lam > lam_prime:
        band = (losses > lam_prime) & (losses < lam)
        rho = lam * lam_prime / (lam - lam_prime)
        v[band] = rho / losses[band] - lam_prime / (lam - lam_prime)
        np.clip(v, 0.0, 1.0, out=v)
    return v


def spr_objective(losses, weights, lam: float, lam_prime: float) -> float:
    """``sum v_i L_i - rho * sum ln(v_i + rho / lam)``."""
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    rho = lam * lam_prime / (lam - lam_prime)
    return float(np.dot(weights, losses) - rho * np.log(weights + rho / lam).sum())


# -- training ----------------------------------------------------------------

@dataclass
class TrainingSet:
    """Model inputs and targets as ``(N, C, S, S)`` arrays."""

    inputs: np.ndarray
    targets: np.ndarray
    channel_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_volumes(cls, volumes: np.ndarray, paradigm: str = "REC", seed: int = 0,
                     sources: np.ndarray | None = None) -> "TrainingSet":
        """Apply a learning paradigm to each cube volume (slices on axis 1).

        ``sources`` supplies the volumes the inputs are derived from when they
        differ from the targets (STC inputs for OFC targets).
        """
        paradigm = paradigm.upper()
        n = len(volumes)
        src = volumes if sources is None else sources
        seeds = np.random.default_rng(seed).integers(0, 2**32, size=n)
        inputs = np.empty((n,) + src.shape[1:], dtype=np.float32)
        targets = np.asarray(volumes, dtype=np.float32)
        slice_mask = None
        for i in range(n):
            pair = apply_paradigm(volumes[i], paradigm, int(seeds[i]),
                                  None if sources is None else src[i])
            inputs[i] = pair.input
            slice_mask = pair.slice_mask
        if n == 0:
            slice_mask = np.ones(volumes.shape[1], dtype=bool)
        size = volumes.shape[-1]
        per_slice_out = int(np.prod(volumes.shape[2:-2], dtype=np.int64))
        mask = None if slice_mask.all() else np.repeat(slice_mask, per_slice_out)
        in_ch = int(np.prod(src.shape[1:-2], dtype=np.int64))
        out_ch = int(np.prod(volumes.shape[1:-2], dtype=np.int64))
        return cls(inputs.reshape(n, in_ch, size, size), targets.reshape(n, out_ch, size, size), mask)


@dataclass
class TrainResult:
    model: Autoencoder
    optimizer: Adam
    pace: PaceState
    batches: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    last_weights: np.ndarray | None = None


def train(data: TrainingSet, config: TrainConfig, model: Autoencoder, optimizer: Adam | None = None,
          on_epoch_end: Callable[[int, Autoencoder], dict] | None = None) -> TrainResult:
    """Warm up for ``T_prime`` epochs on the plain reconstruction loss, then
    refine: each batch's losses set the thresholds, t advances, the closed-form
    weights are solved and one weighted Adam step is taken.

    ``on_epoch_end(epoch, model)`` may return extra telemetry for the epoch
    row; it must not touch the parameters.
    """
    config.validate()
    n_total = len(data)
    if n_total == 0:
        raise ConfigurationError("cannot train on an empty corpus")
    optimizer = optimizer or Adam()
    rng = np.random.default_rng(config.seed)
    pace = PaceState(t=0, r=config.r, start_coeff=config.pace_start_coeff)
    result = TrainResult(model, optimizer, pace)
    last_weights = np.full(n_total, np.nan)
    n_batches = math.ceil(n_total / config.n)

    def refine(losses: np.ndarray) -> np.ndarray:
        lam, lam_prime = pace_thresholds(losses, pace.t, pace.r, pace.start_coeff)
        pace.lam, pace.lam_prime = lam, lam_prime
        pace.t += 1
        mu, sigma = batch_stats(losses)
        if sigma <= CONSTANT_BATCH_RTOL * abs(mu):
            return np.ones_like(losses)
        return solve_weights(losses, lam, lam_prime)

    for epoch in range(1, config.T + 1):
        order = rng.permutation(n_total)
        warm = epoch <= config.T_prime
        epoch_loss, epoch_drop = 0.0, 0
        for j in range(n_batches):
            idx = order[j * config.n:(j + 1) * config.n]
            t_used = pace.t
            try:
                losses, w, mean_loss = weighted_backward_step(
                    model, optimizer, data.inputs[idx], data.targets[idx],
                    None if warm else refine, data.channel_mask)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {j + 1}: {exc}") from None
            last_weights[idx] = w
            dropped = int((w == 0).sum())
            epoch_loss += float(losses.sum())
            epoch_drop += dropped
            result.batches.append({
                "epoch": epoch, "batch": j + 1, "t": "" if warm else t_used,
                "lambda": "" if warm else pace.lam, "lambda_prime": "" if warm else pace.lam_prime,
                "mean_loss": float(losses.mean()), "drop_fraction": dropped / len(idx),
            })
        row = {"epoch": epoch, "mean_loss": epoch_loss / n_total, "drop_fraction": epoch_drop / n_total}
        if on_epoch_end is not None:
            row.update(on_epoch_end(epoch, model) or {})
        result.epochs.append(row)
        log.info("epoch %d/%d loss %.6f drop %.3f", epoch, config.T, row["mean_loss"], row["drop_fraction"])
    result.last_weights = last_weights
    return result


def train_motion(stc: np.ndarray, ofc: np.ndarray, config: TrainConfig, model: Autoencoder,
                 optimizer: Adam | None = None, on_epoch_end=None) -> TrainResult:
    """Cross-modal training: STC volumes in, OFC volumes out, with the
    refinement weights driven by the motion reconstruction loss."""
    if len(stc) != len(ofc):
        raise ConfigurationError(f"{len(stc)} STCs but {len(ofc)} OFCs")
    data = TrainingSet.from_volumes(ofc, config.paradigm, config.seed, sources=stc)
    return train(data, config, model, optimizer, on_epoch_end)


def evaluate_losses(model: Autoencoder, data: TrainingSet, batch_size: int = 512) -> np.ndarray:
    """Per-sample reconstruction loss of a whole training set (no update)."""
    out = np.empty(len(data))
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = per_sample_loss(model.forward(data.inputs[sl]), data.targets[sl], data.channel_mask)
    return out


def label_monitor(data: TrainingSet, labels: np.ndarray) -> Callable[[int, Autoencoder], dict]:
    """Epoch callback recording mean loss of normal and abnormal samples."""
    labels = np.asarray(labels).astype(bool)

    def monitor(epoch: int, model: Autoencoder) -> dict:
        losses = evaluate_losses(model, data)
        return {
            "mean_rl_normal": float(losses[~labels].mean()) if (~labels).any() else math.nan,
            "mean_rl_abnormal": float(losses[labels].mean()) if labels.any() else math.nan,
        }

    return monitor
