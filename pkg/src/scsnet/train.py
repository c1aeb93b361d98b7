"""Loss, optimizer, training loop and checkpointing.

The loop is deterministic end to end: batch order comes from Philox
streams keyed (seed, epoch), layer init from (seed + layer index), and
Adam is arithmetic only.  A checkpoint therefore needs no generator state
blobs; seed and epoch index reconstruct every stream, and an interrupted
run resumed from disk is bit-identical to an uninterrupted one in double
precision.

Checkpoint file layout (little-endian):

    "SCSC" | u32 version=1 | u64 seed | u32 epoch | u32 best_epoch
    | f64 best_val_acc | u64 adam_t | 32-byte config digest
    | 32-byte dataset digest | 4 array sections: current params,
    best-validation params, Adam first moments, Adam second moments

Each section is u32 count, then per array: u16 name length | name utf-8
| u8 rank | rank u64 dims | float64 values.  Array names sort before
writing, so identical contents yield identical bytes.

History files hold one line per epoch:

    epoch=N train_loss=L train_acc=A val_loss=L val_acc=A

with losses to 6 decimals and accuracies as percentages to 4.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, backward, exp, log, mul, reduce_mean, reduce_sum, sub
from .errors import ContractError, DataError, FormatError, TrainingError
from .hsio import _Reader
from .pipeline import batch_iter

CHECKPOINT_MAGIC = b"SCSC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 256
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ContractError("adam_eps must be positive")
        self.seed = int(self.seed) % (1 << 64)


def softmax_cross_entropy(logits, targets):
    """Mean negative log softmax probability of the true classes.

    logits: Tensor [N, C]; targets: 1-based class ids, length N.  Uses
    the max-shifted form, with the shift detached (it is a constant per
    row as far as the gradient is concerned).
    """
    if logits.data.ndim != 2:
        raise ContractError(f"logits must be [N, C], got {logits.shape}")
    n, c = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ContractError(f"need {n} targets, got shape {targets.shape}")
    if targets.min() < 1 or targets.max() > c:
        raise ContractError(f"targets must lie in [1, {c}]")
    dtype = logits.data.dtype
    shift = np.broadcast_to(logits.data.max(axis=1, keepdims=True), (n, c))
    z = sub(logits, Tensor(np.ascontiguousarray(shift)))
    log_denom = log(reduce_sum(exp(z), axis=1))
    onehot = np.zeros((n, c), dtype=dtype)
    onehot[np.arange(n), targets - 1] = 1.0
    picked = reduce_sum(mul(z, Tensor(onehot)), axis=1)
    return reduce_mean(sub(log_denom, picked))


def accuracy(logits_data, targets):
    """Percent of rows whose argmax matches the 1-based target."""
    predicted = np.argmax(logits_data, axis=1) + 1
    return 100.0 * float(np.mean(predicted == np.asarray(targets)))


# ---- optimizer -----------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments per parameter name, plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_optimizer(params):
    state = OptimizerState()
    for name, tensor in params:
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def adam_step(params, state, cfg):
    """One Adam update with bias correction, in place on param data."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    scale1 = 1.0 - b1 ** state.t
    scale2 = 1.0 - b2 ** state.t
    for name, tensor in params:
        g = tensor.grad
        if g is None:
            raise TrainingError(f"parameter {name} received no gradient")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= cfg.learning_rate * (m / scale1) / (np.sqrt(v / scale2) + cfg.adam_eps)


# ---- evaluation ----------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: np.ndarray


def _model_dtype(model):
    params = model.parameters()
    return params[0][1].data.dtype if params else np.dtype(np.float64)


def evaluate_model(model, samples, batch_size=256):
    """Full deterministic pass in listed order; no parameter updates."""
    if not samples:
        raise ContractError("no samples to evaluate")
    dtype = _model_dtype(model)
    total_loss = 0.0
    correct = 0
    predictions = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        patches = np.stack([s.patch for s in chunk]).astype(dtype, copy=False)
        targets = np.array([s.label for s in chunk], dtype=np.int64)
        logits = model.forward(Tensor(patches))
        loss = softmax_cross_entropy(logits, targets)
        total_loss += loss.item() * len(chunk)
        predicted = np.argmax(logits.data, axis=1) + 1
        correct += int(np.sum(predicted == targets))
        predictions.append(predicted)
    n = len(samples)
    return EvalResult(loss=total_loss / n, accuracy=100.0 * correct / n,
                      predictions=np.concatenate(predictions))


# ---- training loop -------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    history: list
    state: OptimizerState
    best_epoch: int
    best_val_acc: float
    best_params: dict


def format_history_line(rec):
    return (f"epoch={rec.epoch} train_loss={rec.train_loss:.6f} "
            f"train_acc={rec.train_acc:.4f} val_loss={rec.val_loss:.6f} "
            f"val_acc={rec.val_acc:.4f}")


def save_history(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(format_history_line(rec) + "\n")


def train(model, train_samples, val_samples, cfg, start_epoch=0, state=None,
          best=None, on_epoch=None):
    """Run epochs [start_epoch, cfg.epochs) of seeded minibatch Adam.

    Per-epoch train loss/accuracy are averaged over the optimization
    batches (measured before each update); validation metrics come from a
    full pass afterwards.  The best-validation-accuracy parameters are
    kept aside and returned.  `best` and `state` let a checkpointed run
    continue exactly where it stopped; `on_epoch(result_so_far)` runs
    after each epoch for callers that persist progress.
    """
    if start_epoch > cfg.epochs:
        raise ContractError(f"start epoch {start_epoch} is beyond the "
                            f"configured {cfg.epochs} epochs")
    if cfg.epochs > start_epoch and (not train_samples or not val_samples):
        raise ContractError("training needs nonempty train and val sets")
    params = model.parameters()
    dtype = _model_dtype(model)
    if state is None:
        state = init_optimizer(params)
    if best is None:
        best_epoch, best_val_acc, best_params = -1, -1.0, model.state_dict()
    else:
        best_epoch, best_val_acc, best_params = best
    history = []

    for epoch in range(start_epoch, cfg.epochs):
        seen = 0
        loss_sum = 0.0
        acc_sum = 0.0
        for patches, targets in batch_iter(train_samples, cfg.batch_size,
                                           cfg.seed, epoch):
            logits = model.forward(Tensor(patches.astype(dtype, copy=False)))
            loss = softmax_cross_entropy(logits, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"training diverged: non-finite loss at "
                                    f"epoch {epoch}")
            n = len(targets)
            seen += n
            loss_sum += value * n
            acc_sum += accuracy(logits.data, targets) * n
            model.zero_grad()
            backward(loss)
            adam_step(params, state, cfg)
        val = evaluate_model(model, val_samples, cfg.batch_size)
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / seen,
                             train_acc=acc_sum / seen, val_loss=val.loss,
                             val_acc=val.accuracy)
        history.append(record)
        if val.accuracy > best_val_acc:
            best_epoch, best_val_acc = epoch, val.accuracy
            best_params = model.state_dict()
        if on_epoch is not None:
            on_epoch(TrainResult(history=history, state=state,
                                 best_epoch=best_epoch,
                                 best_val_acc=best_val_acc,
                                 best_params=best_params))

    return TrainResult(history=history, state=state, best_epoch=best_epoch,
                       best_val_acc=best_val_acc, best_params=best_params)


# ---- digests and checkpoints ---------------------------------------------


def digest_text(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


def digest_files(*paths):
    """One digest over several files; lengths are mixed in so moving a
    byte across a file boundary changes the result."""
    h = hashlib.sha256()
    for path in paths:
        blob = open(path, "rb").read()
        h.update(struct.pack("<Q", len(blob)))
        h.update(blob)
    return h.digest()


@dataclass
class Checkpoint:
    seed: int
    epoch: int
    best_epoch: int
    best_val_acc: float
    adam_t: int
    config_digest: bytes
    dataset_digest: bytes
    params: dict
    best_params: dict
    adam_m: dict
    adam_v: dict


def _write_arrays(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def _read_arrays(r, what):
    count = r.u32(f"{what} count")
    out = {}
    for _ in range(count):
        name = r.take(r.u16(f"{what} name length"), f"{what} name").decode("utf-8")
        ndim = r.u8(f"{name} rank")
        shape = tuple(r.u64(f"{name} dim") for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(n * 8, f"{name} values")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out


def save_checkpoint(path, epoch, params, state, best_epoch, best_val_acc,
                    best_params, seed, config_digest, dataset_digest):
    """params: iterable of (name, Tensor) as returned by model.parameters()."""
    if len(config_digest) != 32 or len(dataset_digest) != 32:
        raise ContractError("digests must be 32-byte sha256 values")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQIIdQ", CHECKPOINT_VERSION, int(seed) % (1 << 64),
                             epoch, best_epoch & 0xFFFFFFFF, best_val_acc,
                             state.t))
        fh.write(config_digest)
        fh.write(dataset_digest)
        _write_arrays(fh, {name: t.data for name, t in params})
        _write_arrays(fh, best_params)
        _write_arrays(fh, state.m)
        _write_arrays(fh, state.v)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(path, fh.read())
    got = r.take(4, "magic")
    if got != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {got!r}, expected "
                                   f"{CHECKPOINT_MAGIC!r}")
    at = r.pos
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, at, f"unsupported version {version}")
    seed = r.u64("seed")
    epoch = r.u32("epoch")
    best_epoch = r.u32("best epoch")
    if best_epoch == 0xFFFFFFFF:
        best_epoch = -1
    best_val_acc = r.f64("best val accuracy")
    adam_t = r.u64("adam step counter")
    config_digest = r.take(32, "config digest")
    dataset_digest = r.take(32, "dataset digest")
    params = _read_arrays(r, "params")
    best_params = _read_arrays(r, "best params")
    adam_m = _read_arrays(r, "adam m")
    adam_v = _read_arrays(r, "adam v")
    if r.pos != len(r.blob):
        raise FormatError(path, r.pos, "trailing data after checkpoint")
    return Checkpoint(seed=seed, epoch=epoch, best_epoch=best_epoch,
                      best_val_acc=best_val_acc, adam_t=adam_t,
                      config_digest=config_digest,
                      dataset_digest=dataset_digest, params=params,
                      best_params=best_params, adam_m=adam_m, adam_v=adam_v)


def restore_training(model, checkpoint):
    """Load checkpointed params and moments into a freshly built model.

    Returns (state, best) ready to pass to train(...).  The caller is
    responsible for verifying the config and dataset digests first.
    """
    model.load_state_dict(checkpoint.params)
    names = {name for name, _ in model.parameters()}
    for section, label in ((checkpoint.adam_m, "first"),
                           (checkpoint.adam_v, "second")):
        if set(section) != names:
            raise DataError(f"checkpoint {label}-moment arrays do not match "
                            f"the model's parameters")
    state = OptimizerState(m={k: v.copy() for k, v in checkpoint.adam_m.items()},
                           v={k: v.copy() for k, v in checkpoint.adam_v.items()},
                           t=checkpoint.adam_t)
    best = (checkpoint.best_epoch, checkpoint.best_val_acc,
            {k: v.copy() for k, v in checkpoint.best_params.items()})
    return state, best
