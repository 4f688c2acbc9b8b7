"""Training loop for the correspondence network.

Runs a two-phase schedule over sampled shape pairs: a warm-up phase that
optimizes only the map-coupling penalty, then the configured objective
(cyclic by default). Every step logs all four losses whether or not they
are being optimized, so runs can be compared after the fact. Checkpoints
round-trip bit-exactly, including optimizer moments and the pair-sampling
RNG state, which makes interrupted runs resumable without drift.
"""

import math
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ExportError, NonFiniteError
from .geodesy import PointMap, fps_sample
from .model import (
    LossBreakdown,
    ModelParams,
    backward,
    coupling_loss,
    cyclic_loss,
    forward_pair,
    init_params,
    isometric_loss,
    param_shapes,
    params_from_tensors,
    supervised_loss,
)

CHECKPOINT_MAGIC = b"CYFM"
CHECKPOINT_VERSION = 1

_HEAD = struct.Struct("<4sII")
_COUNTERS = struct.Struct("<QQQ")
_RNG_TAIL = struct.Struct("<II")
_TENSOR_LEN = struct.Struct("<Q")


@dataclass
class TrainConfig:
    """Everything that determines a training trajectory.

    Field order is the canonical order used when a config is serialized
    into a checkpoint, so it must stay stable across versions.
    """

    k: int = 70
    scales: int = 5
    width: int = 352
    blocks: int = 7
    reg: float = 1e-3
    batch_size: int = 4
    epochs: int = 10
    coupling_epochs: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 10.0
    weight_cyclic: float = 1.0
    weight_isometric: float = 0.0
    weight_supervised: float = 0.0
    weight_coupling: float = 0.0
    loss_samples: int = 0
    one_shot: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.k, self.scales, self.width, self.blocks) < 1:
            raise ConfigError("k, scales, width, and blocks must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got "
                              f"{self.batch_size}")
        if self.epochs < 0 or self.coupling_epochs < 0:
            raise ConfigError("epochs and coupling_epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got "
                              f"{self.learning_rate}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if self.epsilon <= 0 or self.clip_norm <= 0:
            raise ConfigError("epsilon and clip_norm must be > 0")
        if self.reg < 0:
            raise ConfigError(f"reg must be >= 0, got {self.reg}")
        for name in ("weight_cyclic", "weight_isometric",
                     "weight_supervised", "weight_coupling"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.loss_samples < 0:
            raise ConfigError("loss_samples must be >= 0 (0 means all)")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def encode_config(config: TrainConfig) -> bytes:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if f.type == "bool" or isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_config(blob: bytes) -> TrainConfig:
    # field annotations may surface as type objects or as strings
    spec = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
            for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(blob.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        if not sep or key not in spec:
            raise CheckpointError(
                f"config line {lineno} is not a known key=value pair: "
                f"{line!r}")
        kind = spec[key]
        try:
            if kind == "bool":
                if raw not in ("true", "false"):
                    raise ValueError(raw)
                values[key] = raw == "true"
            elif kind == "int":
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        except ValueError:
            raise CheckpointError(
                f"config value for {key} is not a valid {kind}: {raw!r}")
    missing = set(spec) - set(values)
    if missing:
        raise CheckpointError(f"config is missing keys: {sorted(missing)}")
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise CheckpointError(f"stored config is invalid: {exc}")


@dataclass
class AdamState:
    """First/second gradient moments plus the bias-correction counter."""

    t: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(t=0,
                   m={n: np.zeros_like(a) for n, a in
                      params.named_tensors()},
                   v={n: np.zeros_like(a) for n, a in
                      params.named_tensors()})


def adam_step(params: ModelParams, state: AdamState, grads: dict,
              config: TrainConfig) -> None:
    """One adaptive-moment update, in place.

    The gradient is first clipped to global norm ``config.clip_norm``
    (all tensors jointly), then both moment estimates are updated and the
    bias-corrected step is applied. With fresh moments and a zero
    gradient the parameters do not move.
    """
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    factor = config.clip_norm / gnorm if gnorm > config.clip_norm else 1.0
    state.t += 1
    c1 = 1.0 - config.beta1 ** state.t
    c2 = 1.0 - config.beta2 ** state.t
    updates = {}
    for name, _ in params.named_tensors():
        g = grads[name] * factor
        state.m[name] = config.beta1 * state.m[name] \
            + (1.0 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] \
            + (1.0 - config.beta2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        updates[name] = -config.learning_rate * mhat \
            / (np.sqrt(vhat) + config.epsilon)
    params.apply_updates(updates)


def sample_pairs(dataset, batch_size, rng, self_pairs=False):
    """Uniformly sampled ordered index pairs, (i, i) excluded by default."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot sample pairs from an empty dataset")
    if n < 2 and not self_pairs:
        raise ConfigError("need at least 2 shapes to form distinct pairs")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    pairs = []
    for _ in range(batch_size):
        i = int(rng.integers(n))
        if self_pairs:
            j = int(rng.integers(n))
        else:
            j = (i + 1 + int(rng.integers(n - 1))) % n
        pairs.append((i, j))
    return pairs


@dataclass(frozen=True)
class _LossView:
    """Distance data restricted to the vertices the losses are scored on."""

    vertices: np.ndarray
    values: np.ndarray
    restricted: bool   # correspondence matrices need subsetting
    dist_full: bool    # the context's matrix covers every vertex


def _loss_view(ctx, loss_samples):
    si = np.asarray(ctx.dist.sample_indices)
    n = ctx.mesh.n_vertices
    dist_full = si.size == n
    if loss_samples > 0 and dist_full and loss_samples < n:
        verts = fps_sample(ctx.mesh, loss_samples, seed=0)
        return _LossView(vertices=verts,
                         values=ctx.dist.values[np.ix_(verts, verts)],
                         restricted=True, dist_full=True)
    return _LossView(vertices=si, values=ctx.dist.values,
                     restricted=not dist_full, dist_full=dist_full)


def _pair_losses(params, ctx_x, ctx_y, view_x, view_y, config, gt):
    """Forward one ordered pair and build all four loss nodes.

    Returns (pair_forward, dict of Vars); the supervised entry is None
    when no ground truth is available or the target distance matrix does
    not cover every target vertex.
    """
    fwd = forward_pair(params, ctx_x, ctx_y, reg=config.reg)
    P, Pt = fwd.P, fwd.P_tilde
    if view_x.restricted:
        Ps = ad.take_cols(P, view_x.vertices)
        Pts = ad.take_rows(Pt, view_x.vertices)
    else:
        Ps, Pts = P, Pt
    losses = {"cyclic": cyclic_loss(Ps, Pts, view_x.values)}
    Pty = ad.take_cols(Pts, view_y.vertices) if view_y.restricted else Pts
    losses["isometric"] = isometric_loss(Pty, view_x.values, view_y.values)
    losses["supervised"] = None
    if gt is not None and view_y.dist_full:
        targets = np.asarray(gt.assignments)[view_x.vertices]
        losses["supervised"] = supervised_loss(Ps, ctx_y.dist.values,
                                               PointMap(targets))
    losses["coupling"] = coupling_loss(P, Pt)
    return fwd, losses


def _objective(losses, config, phase):
    if phase == "coupling":
        return losses["coupling"]
    terms = []
    for name in ("cyclic", "isometric", "supervised", "coupling"):
        weight = getattr(config, f"weight_{name}")
        if weight == 0.0:
            continue
        if losses[name] is None:
            raise ConfigError(
                "the supervised objective needs ground-truth labels and a "
                "full target distance matrix")
        terms.append(ad.scale(losses[name], weight))
    if not terms:
        raise ConfigError("objective phase requires at least one nonzero "
                          "loss weight")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def step(params, state, batch, config, phase="objective", views=None):
    """Forward/backward every pair in the batch and apply one update.

    Parameters
    ----------
    params : ModelParams
        Updated in place.
    state : AdamState
        Updated in place.
    batch : list of (ShapeContext, ShapeContext, PointMap or None)
        Ordered source/target pairs with optional ground truth.
    config : TrainConfig
    phase : str
        "coupling" or "objective"; selects what the update optimizes.
    views : dict, optional
        id(context) -> precomputed loss view, to avoid resampling.

    Returns
    -------
    LossBreakdown
        Batch means of the optimized total and of all four losses
        (supervised is None if unavailable for every pair).
    """
    if not batch:
        raise ConfigError("empty batch")
    views = views if views is not None else {}
    acc = None
    sums = {"cyclic": 0.0, "isometric": 0.0, "coupling": 0.0}
    sup_values = []
    total_sum = 0.0
    for ctx_x, ctx_y, gt in batch:
        for ctx in (ctx_x, ctx_y):
            if id(ctx) not in views:
                views[id(ctx)] = _loss_view(ctx, config.loss_samples)
        fwd, losses = _pair_losses(params, ctx_x, ctx_y, views[id(ctx_x)],
                                   views[id(ctx_y)], config, gt)
        total = _objective(losses, config, phase)
        grads = backward(fwd, total)
        if acc is None:
            acc = grads
        else:
            for name in acc:
                acc[name] += grads[name]
        total_sum += float(total.value)
        for name in sums:
            sums[name] += float(losses[name].value)
        if losses["supervised"] is not None:
            sup_values.append(float(losses["supervised"].value))
    b = len(batch)
    for name in acc:
        acc[name] /= b
    adam_step(params, state, acc, config)
    return LossBreakdown(
        total=total_sum / b,
        cyclic=sums["cyclic"] / b,
        isometric=sums["isometric"] / b,
        supervised=sum(sup_values) / len(sup_values) if sup_values else None,
        coupling=sums["coupling"] / b)


@dataclass
class StepRecord:
    """One loss-log row; supervised may be None when no labels exist."""

    step: int
    epoch: int
    phase: str
    cyclic: float
    isometric: float
    supervised: object
    coupling: float


LOG_HEADER = "step,epoch,phase,cyclic,isometric,supervised,coupling"


def save_loss_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in records:
            sup = "" if r.supervised is None else repr(float(r.supervised))
            fh.write(f"{r.step},{r.epoch},{r.phase},{repr(float(r.cyclic))},"
                     f"{repr(float(r.isometric))},{sup},"
                     f"{repr(float(r.coupling))}\n")


def load_loss_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ExportError(f"{path}: missing loss-log header")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        if len(parts) != 7:
            raise ExportError(f"{path}:{lineno}: expected 7 fields, got "
                              f"{len(parts)}")
        try:
            records.append(StepRecord(
                step=int(parts[0]), epoch=int(parts[1]), phase=parts[2],
                cyclic=float(parts[3]), isometric=float(parts[4]),
                supervised=None if parts[5] == "" else float(parts[5]),
                coupling=float(parts[6])))
        except ValueError as exc:
            raise ExportError(f"{path}:{lineno}: {exc}")
    return records


@dataclass
class Checkpoint:
    """A complete training snapshot; round-trips bit-exactly."""

    config: TrainConfig
    params: ModelParams
    adam: AdamState
    epoch: int
    step: int
    rng_state: dict
    version: int = CHECKPOINT_VERSION


def _fresh_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _rng_from_state(state_dict):
    bg = np.random.PCG64()
    bg.state = state_dict
    return np.random.Generator(bg)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = encode_config(ckpt.config)
    chunks = [_HEAD.pack(CHECKPOINT_MAGIC, ckpt.version, len(blob)), blob,
              _COUNTERS.pack(ckpt.epoch, ckpt.step, ckpt.adam.t)]
    inner = ckpt.rng_state["state"]
    chunks.append(int(inner["state"]).to_bytes(16, "little"))
    chunks.append(int(inner["inc"]).to_bytes(16, "little"))
    chunks.append(_RNG_TAIL.pack(int(ckpt.rng_state["has_uint32"]),
                                 int(ckpt.rng_state["uinteger"])))
    groups = [dict(ckpt.params.named_tensors()), ckpt.adam.m, ckpt.adam.v]
    order = [name for name, _ in ckpt.params.named_tensors()]
    for group in groups:
        for name in order:
            data = np.ascontiguousarray(group[name],
                                        dtype="<f8").tobytes()
            chunks.append(_TENSOR_LEN.pack(len(data)))
            chunks.append(data)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint (needed {n} bytes at "
                f"offset {self.pos}, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, expect: TrainConfig = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``expect`` is given, the stored network geometry (k, scales,
    width, blocks) must match it; anything else may differ.
    """
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    magic, version, blob_len = _HEAD.unpack(cur.take(_HEAD.size))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic "
                              f"{magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{version}")
    config = decode_config(cur.take(blob_len))
    epoch, gstep, adam_t = _COUNTERS.unpack(cur.take(_COUNTERS.size))
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(cur.take(16), "little"),
                  "inc": int.from_bytes(cur.take(16), "little")},
    }
    has_uint32, uinteger = _RNG_TAIL.unpack(cur.take(_RNG_TAIL.size))
    rng_state["has_uint32"] = has_uint32
    rng_state["uinteger"] = uinteger
    shapes = param_shapes(config.scales, config.width, config.blocks)
    groups = []
    for _ in range(3):
        tensors = {}
        for name, shape in shapes:
            (nbytes,) = _TENSOR_LEN.unpack(cur.take(_TENSOR_LEN.size))
            expected = int(np.prod(shape)) * 8
            if nbytes != expected:
                raise CheckpointError(
                    f"{path}: tensor {name} holds {nbytes} bytes but the "
                    f"stored config implies {expected}")
            arr = np.frombuffer(cur.take(nbytes), dtype="<f8")
            tensors[name] = arr.astype(np.float64).reshape(shape)
        groups.append(tensors)
    if cur.pos != len(cur.data):
        raise CheckpointError(f"{path}: {len(cur.data) - cur.pos} bytes of "
                              f"trailing data")
    if expect is not None:
        bad = [(n, getattr(config, n), getattr(expect, n))
               for n in ("k", "scales", "width", "blocks")
               if getattr(config, n) != getattr(expect, n)]
        if bad:
            detail = ", ".join(f"{n}: checkpoint has {a}, expected {b}"
                               for n, a, b in bad)
            raise CheckpointError(f"{path}: incompatible checkpoint "
                                  f"({detail})")
    params = params_from_tensors(config.scales, config.width,
                                 config.blocks, groups[0])
    adam = AdamState(t=adam_t, m=groups[1], v=groups[2])
    return Checkpoint(config=config, params=params, adam=adam, epoch=epoch,
                      step=gstep, rng_state=rng_state, version=version)


def _check_dataset(dataset, config):
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    if config.one_shot and len(dataset) != 2:
        raise ConfigError(f"one-shot mode trains exactly one ordered pair; "
                          f"got {len(dataset)} shapes")
    if not config.one_shot and len(dataset) < 2:
        raise ConfigError("need at least 2 shapes (or one-shot mode)")
    for i, ctx in enumerate(dataset):
        k = ctx.basis.eigenfunctions.shape[1]
        if k != config.k:
            raise ConfigError(f"shape {i} was preprocessed with k={k}, "
                              f"config says k={config.k}")
        if ctx.stack.m != config.scales or ctx.stack.s != config.width:
            raise ConfigError(
                f"shape {i} has a {ctx.stack.m}x{ctx.stack.s} descriptor "
                f"stack, config says {config.scales}x{config.width}")


def train(dataset, config: TrainConfig, *, labels=None, resume=None,
          checkpoint_path=None, checkpoint_every=1, log_path=None):
    """Run the two-phase schedule and return the final snapshot.

    Parameters
    ----------
    dataset : list of ShapeContext
        Preprocessed shapes, all at the config's k, scales, and width.
    config : TrainConfig
        Epochs ``[0, coupling_epochs)`` optimize the coupling penalty;
        the rest optimize the weighted objective (cyclic by default). In
        one-shot mode the dataset is exactly two shapes, every epoch is
        the single step on the ordered pair (0, 1), and ``batch_size``
        is ignored.
    labels : dict, optional
        (source index, target index) -> ground-truth PointMap; enables
        the supervised loss for those pairs (logged always, optimized
        only if its weight is nonzero).
    resume : Checkpoint, optional
        Continue a previous run; its config must match ``config``.
        Training resumes at the stored epoch and reproduces the
        uninterrupted trajectory bit-for-bit in single-threaded mode.
    checkpoint_path : str, optional
        Where to write snapshots (every ``checkpoint_every`` epochs and
        at the end).
    log_path : str, optional
        Where to write the loss CSV for the executed epochs.

    Returns
    -------
    (Checkpoint, list of StepRecord)
    """
    _check_dataset(dataset, config)
    if config.epochs > config.coupling_epochs:
        weights = (config.weight_cyclic, config.weight_isometric,
                   config.weight_supervised, config.weight_coupling)
        if all(w == 0.0 for w in weights):
            raise ConfigError("objective phase requires at least one "
                              "nonzero loss weight")
    labels = labels or {}

    if resume is not None:
        if encode_config(resume.config) != encode_config(config):
            raise CheckpointError("resume checkpoint was trained with a "
                                  "different config")
        params = resume.params
        adam = resume.adam
        rng = _rng_from_state(resume.rng_state)
        start_epoch = resume.epoch
        gstep = resume.step
    else:
        params = init_params(config.scales, config.width, config.blocks,
                             seed=config.seed)
        adam = AdamState.fresh(params)
        rng = _fresh_rng(config.seed)
        start_epoch = 0
        gstep = 0

    views = {id(ctx): _loss_view(ctx, config.loss_samples)
             for ctx in dataset}
    n = len(dataset)
    if config.one_shot:
        steps_per_epoch = 1
    else:
        steps_per_epoch = max(1, math.ceil(n * (n - 1) / config.batch_size))

    def snapshot(epoch):
        return Checkpoint(config=config, params=params, adam=adam,
                          epoch=epoch, step=gstep,
                          rng_state=rng.bit_generator.state)

    records = []
    for epoch in range(start_epoch, config.epochs):
        phase = ("coupling" if epoch < config.coupling_epochs
                 else "objective")
        for _ in range(steps_per_epoch):
            if config.one_shot:
                idx_pairs = [(0, 1)]
            else:
                idx_pairs = sample_pairs(dataset, config.batch_size, rng)
            batch = [(dataset[i], dataset[j], labels.get((i, j)))
                     for i, j in idx_pairs]
            try:
                out = step(params, adam, batch, config, phase=phase,
                           views=views)
            except NonFiniteError as exc:
                raise NonFiniteError(f"training aborted at step {gstep} "
                                     f"(epoch {epoch}, {phase} phase): "
                                     f"{exc}") from exc
            records.append(StepRecord(
                step=gstep, epoch=epoch, phase=phase, cyclic=out.cyclic,
                isometric=out.isometric, supervised=out.supervised,
                coupling=out.coupling))
            gstep += 1
        done = epoch + 1
        if checkpoint_path and (done % checkpoint_every == 0
                                or done == config.epochs):
            save_checkpoint(snapshot(done), checkpoint_path)

    final = snapshot(max(start_epoch, config.epochs))
    if checkpoint_path:
        save_checkpoint(final, checkpoint_path)
    if log_path:
        save_loss_log(records, log_path)
    return final, records
