"""Scale-only adaptation: AdamW, linear-decay schedule, training loop, evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .numkit import make_rng
from .tasks import Dataset
from .toymodel import ToyTransformer, backward_lm, cross_entropy, forward_lm

log = logging.getLogger(__name__)

#: Learning-rate and weight-decay grids explored for scale-only tuning.
SWEEP_GRID = {
    "lr": (1e-4, 2e-4, 5e-4, 1e-3, 2e-3),
    "weight_decay": (0.0, 0.01, 0.05, 0.1),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 5
    batch_size: int = 16
    warmup_steps: int = 0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    trainable_planes: tuple[int, ...] = (1,)

    def __post_init__(self):
        self.trainable_planes = tuple(sorted(set(self.trainable_planes)))
        if not self.lr > 0:
            raise ConfigError("lr: must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps: must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")


# -- optimizer -----------------------------------------------------------------------------

@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of parameter arrays."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    def state_size(self) -> int:
        return sum(a.size for a in self.m) + sum(a.size for a in self.v)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             weight_decay: float = 0.0) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} params but {len(grads)} grads")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"param shape {p.shape} != grad shape {g.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient (shape {g.shape}) at step {self.step_count + 1}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            p *= 1.0 - lr * weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = config.warmup_steps
    if step < warm:
        return config.lr * step / warm
    if total_steps == warm:
        return 0.0
    return config.lr * (total_steps - step) / (total_steps - warm)


# -- loop ------------------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(model: ToyTransformer, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and token accuracy over all scored positions."""
    nll = 0.0
    correct = 0
    total = 0
    for start in range(0, len(data), batch_size):
        part = data.subset(slice(start, start + batch_size))
        logits, _ = forward_lm(model, part.tokens)
        loss, _, n = cross_entropy(logits, part.targets)
        nll += loss * n
        mask = part.targets >= 0
        correct += int(np.sum(np.argmax(logits, axis=-1)[mask] == part.targets[mask]))
        total += n
    if total == 0:
        return 0.0, 0.0
    return nll / total, correct / total


def train(model: ToyTransformer, train_data: Dataset, config: TrainConfig,
          valid_data: Dataset | None = None):
    """Train the selected alpha planes of ``model`` in place.

    Returns ``(model, history)``; history has one row per epoch with keys
    ``epoch``, ``train_loss`` (mean over the epoch's steps) and
    ``valid_loss`` (None without validation data). With no trainable planes
    or zero epochs, history holds the baseline evaluation only.
    """
    if len(train_data) == 0:
        raise ConfigError("training data is empty")
    model.trainable_planes = config.trainable_planes
    for i in config.trainable_planes:
        if not 1 <= i <= model.config.q:
            raise ConfigError(f"trainable_planes: plane {i} out of range 1..{model.config.q}")
    params = [arr for _, _, arr in model.trainable_slots()]
    history = []

    def valid_loss():
        return evaluate(model, valid_data)[0] if valid_data is not None else None

    if not params or config.epochs == 0:
        history.append({"epoch": 0, "train_loss": evaluate(model, train_data)[0],
                        "valid_loss": valid_loss()})
        return model, history

    rng = make_rng(config.seed)
    steps_per_epoch = -(-len(train_data) // config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = AdamW(config.betas, config.eps)
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(len(train_data), config.batch_size, rng):
            last_good = [p.copy() for p in params]
            logits, cache = forward_lm(model, train_data.tokens[idx])
            loss, dlogits, _ = cross_entropy(logits, train_data.targets[idx])
            grads = backward_lm(model, cache, dlogits)
            flat = [grads[name][i] for name, i, _ in model.trainable_slots()]
            try:
                if not np.isfinite(loss):
                    raise FloatingPointError(f"loss is {loss}")
                opt.step(params, flat, lr_at(step, total, config), config.weight_decay)
                if not all(np.all(np.isfinite(p)) for p in params):
                    raise FloatingPointError("parameters became non-finite")
            except FloatingPointError as exc:
                for p, good in zip(params, last_good):
                    p[...] = good
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {exc}",
                                            last_good=last_good, history=history) from None
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": valid_loss()}
        log.info("epoch %d train %.4f valid %s", epoch, row["train_loss"], row["valid_loss"])
        history.append(row)
    return model, history


# -- config / history I/O ---------------------------------------------------------------------

RUN_CONFIG_KEYS = ("lr", "weight_decay", "epochs", "batch_size", "warmup_steps", "seed",
                   "q", "g", "trainable_planes")


def parse_run_config(text: str) -> tuple[TrainConfig, dict]:
    """Parse ``key = value`` lines (``#`` comments allowed).

    Returns the training config plus a dict with the quantization keys
    (``q``, ``g``) when present. ``g`` may be ``row``. ``trainable_planes`` is
    a comma-separated list of 1-based plane indices.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in RUN_CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown field (line {lineno})")
        raw[key] = value.strip()

    kwargs, quant = {}, {}
    casts = {"lr": float, "weight_decay": float, "epochs": int, "batch_size": int,
             "warmup_steps": int, "seed": int}
    for key, cast in casts.items():
        if key in raw:
            try:
                kwargs[key] = cast(raw[key])
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw[key]!r} as {cast.__name__}") from None
    if "trainable_planes" in raw:
        try:
            kwargs["trainable_planes"] = tuple(int(v) for v in raw["trainable_planes"].split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"trainable_planes: cannot parse {raw['trainable_planes']!r}") from None
    if "q" in raw:
        try:
            quant["q"] = int(raw["q"])
        except ValueError:
            raise ConfigError(f"q: cannot parse {raw['q']!r} as int") from None
    if "g" in raw:
        from .bcq import ROW
        if raw["g"].lower() == "row":
            quant["g"] = ROW
        else:
            try:
                quant["g"] = int(raw["g"])
            except ValueError:
                raise ConfigError(f"g: cannot parse {raw['g']!r}; use an integer or 'row'") from None
    return TrainConfig(**kwargs), quant


def load_run_config(path) -> tuple[TrainConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss"])
        for row in history:
            valid = "" if row["valid_loss"] is None else repr(float(row["valid_loss"]))
            w.writerow([row["epoch"], repr(float(row["train_loss"])), valid])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "valid_loss": float(r["valid_loss"]) if r["valid_loss"] else None}
                for r in csv.DictReader(fh)]
