"""Relative-L2 objective, AdamW, one-cycle schedule, clipping and the fit loop."""

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, FlareError, InvalidValueError
from .model import model_forward
from .tensor import Tensor, add, as_tensor, div, mul, no_grad, sqrt, square, sub, sum_axes

PRECISIONS = {"single": np.float32, "double": np.float64}


class TrainingError(FlareError, RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    lr_max: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_max_norm: float = 1.0
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)")
        if self.lr_max <= 0:
            raise ConfigError("lr_max must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.clip_max_norm <= 0:
            raise ConfigError("clip_max_norm must be positive")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# objective
# ----------------------------------------------------------------------------

def relative_l2(pred, target):
    """||pred - target|| / ||target||, flattened per sample.

    Inputs of shape (N, d) give one value; (B, N, d) gives the mean over the
    B samples.
    """
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise InvalidValueError(f"prediction {pred.shape} and target {target.shape} differ")
    batched = pred.ndim == 3
    axes = (-2, -1)
    tnorm = np.sqrt((target.astype(np.float64) ** 2).sum(axis=axes))
    if (tnorm == 0).any():
        raise InvalidValueError("relative_l2: target has zero norm")
    err = sqrt(sum_axes(square(sub(pred, target)), axes))
    rel = div(err, tnorm.astype(pred.dtype))
    if batched:
        return mul(sum_axes(rel, 0), 1.0 / pred.shape[0])
    return rel


# ----------------------------------------------------------------------------
# optimizer pieces
# ----------------------------------------------------------------------------

def onecycle_lr(step, total_steps, cfg):
    """Linear warmup from 0 to lr_max, then cosine decay to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.lr_max * step / warm
    span = (total_steps - 1) - warm
    t = 1.0 if span <= 0 else min(1.0, (step - warm) / span)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * t))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    total = global_norm(grads)
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


def adamw_step(params, grads, state, lr, cfg):
    """One AdamW update in place: decoupled decay, then bias-corrected Adam."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise InvalidValueError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data * (1.0 - lr * cfg.weight_decay)
        data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = data.astype(p.dtype, copy=False)
    return params, state


# ----------------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------------

def _batch_arrays(samples, dtype):
    x = np.stack([s.features for s in samples]).astype(dtype)
    y = np.stack([s.labels for s in samples]).astype(dtype)
    return x, y


def _denorm(pred, stats, dtype):
    if stats is None:
        return pred
    return add(mul(pred, np.asarray(stats.label_std, dtype=dtype)),
               np.asarray(stats.label_mean, dtype=dtype))


def _norm_features(x, stats):
    if stats is None:
        return x
    return (x - stats.feature_mean) / stats.feature_std


def batch_loss(params, samples, model_cfg, stats, dtype):
    """Mean per-sample relative L2 of denormalized predictions vs raw labels.

    Equal-length samples are stacked into one batched forward pass.
    """
    if len({s.n_points for s in samples}) == 1:
        x, y = _batch_arrays(samples, dtype)
        pred = _denorm(model_forward(_norm_features(x, stats).astype(dtype), params, model_cfg),
                       stats, dtype)
        return relative_l2(pred, y)
    losses = [batch_loss(params, [s], model_cfg, stats, dtype) for s in samples]
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    return mul(total, 1.0 / len(losses))


def predict(params, sample, model_cfg, stats, dtype=np.float32):
    x = _norm_features(sample.features, stats).astype(dtype)
    with no_grad():
        out = _denorm(model_forward(x, params, model_cfg), stats, dtype)
    return out.data


def evaluate(params, samples, model_cfg, stats, dtype=np.float32):
    """Per-sample relative L2 errors on raw labels."""
    errs = []
    with no_grad():
        for s in samples:
            pred = predict(params, s, model_cfg, stats, dtype)
            errs.append(float(relative_l2(pred.astype(np.float64),
                                          s.labels.astype(np.float64)).data))
    return errs


def steps_per_epoch(n_train, batch_size):
    return -(-n_train // batch_size)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_rel_l2: float
    test_rel_l2: float
    seconds: float

    def row(self):
        return [self.epoch, repr(self.lr), repr(self.train_rel_l2), repr(self.test_rel_l2),
                f"{self.seconds:.4f}"]


LOG_HEADER = ["epoch", "lr", "train_rel_l2", "test_rel_l2", "seconds"]
# columns that are a pure function of config + seed (``seconds`` is wall-clock)
DETERMINISTIC_COLUMNS = LOG_HEADER[:4]


def fit(params, train_set, test_set, model_cfg, cfg, stats=None, *, start_epoch=0,
        opt_state=None, log=None, on_epoch_end=None):
    """Train ``params`` in place for epochs ``start_epoch .. cfg.epochs - 1``.

    Shuffling uses a generator seeded by ``(seed, epoch)`` so that resuming
    from a checkpoint replays the exact same batch order. Returns
    ``(params, log, opt_state)``; ``on_epoch_end(epoch, params, opt_state, log)``
    runs after each epoch.
    """
    if not train_set:
        raise TrainingError("training set is empty")
    dtype = cfg.dtype
    opt_state = OptimizerState() if opt_state is None else opt_state
    log = [] if log is None else list(log)
    per_epoch = steps_per_epoch(len(train_set), cfg.batch_size)
    total = cfg.epochs * per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        seen, loss_sum, lr = 0, 0.0, 0.0
        for b in range(per_epoch):
            batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            for p in params.values():
                p.grad = None
            try:
                loss = batch_loss(params, batch, model_cfg, stats, dtype)
            except InvalidValueError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            clip_grad_norm(grads, cfg.clip_max_norm)
            lr = onecycle_lr(opt_state.step, total, cfg)
            adamw_step(params, grads, opt_state, lr, cfg)
            loss_sum += value * len(batch)
            seen += len(batch)
        test_err = float(np.mean(evaluate(params, test_set, model_cfg, stats, dtype))) if test_set else float("nan")
        log.append(EpochRecord(epoch, lr, loss_sum / seen, test_err, time.perf_counter() - t0))
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, opt_state, log)
    return params, log, opt_state
