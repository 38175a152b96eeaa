"""Adam optimization, the simultaneous dual-loss training loop, and checkpoints.

Every step runs one shared forward pass, derives the expert-side and
gate-side gradients from it (each side treating the other's outputs as
constants), then applies both Adam updates. Expert parameters therefore never
see the variance penalty, and gate parameters never see the expert path.

Determinism: the shuffle order for epoch i derives from SeedSequence
([seed, SHUFFLE_TAG, i]) and the dropout rng for step s of epoch i from
SeedSequence([seed, DROPOUT_TAG, i, s]), so training resumed from an epoch
checkpoint replays the exact same stream as an unbroken run.
"""

import zlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigurationError,
    ShapeMismatchError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .moe import BatchPrediction, expert_loss, gating_loss, grad_expert_outputs, grad_gate_probs
from .tensor import dtype_for

SHUFFLE_TAG = 101
DROPOUT_TAG = 202


@dataclass
class OptimizerConfig:
    eta_expert: float = 1e-3
    eta_gate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.eta_expert <= 0 or self.eta_gate <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam decay rates must lie in [0, 1)")


@dataclass
class TrainingConfig:
    batch_size: int = 64
    epochs: int = 1
    lam: float = 1.0
    num_experts: int = 10
    seed: int = 0
    precision: str = "standard"
    variant: str = "moc"  # moc | ordinary | fc_gating
    expert_config: models.ExpertNetConfig = field(default_factory=models.ExpertNetConfig)
    gate_config: models.GatingNetConfig = field(default_factory=models.GatingNetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.variant not in ("moc", "ordinary", "fc_gating"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        self.optimizer.validate()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, eta, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= eta * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class DualOptimizer:
    """One AdamState per parameter group ('expert', 'gate', 'combiner')."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.states = {}

    def eta(self, group):
        return self.config.eta_gate if group == "gate" else self.config.eta_expert

    def step(self, group, params, grads):
        state = self.states.setdefault(group, AdamState())
        adam_step(params, grads, state, self.eta(group),
                  self.config.beta1, self.config.beta2, self.config.eps)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def _grouped_params(model):
    """group -> flat prefixed dict of live parameter arrays."""
    grouped = {}
    for group, prefix, net in model.param_groups():
        dst = grouped.setdefault(group, {})
        for k, v in net.params.items():
            dst[prefix + k] = v
    return grouped


def _batch_arrays(batch, dtype):
    x = np.stack([s.patch for s in batch]).astype(dtype)
    t = np.array([s.target for s in batch], dtype=dtype)
    return x, t


@dataclass
class StepResult:
    expert_loss: float
    gate_mse: float
    gate_penalty: float
    gate_total: float
    mean_gate: np.ndarray  # (K,) mean gate row of this batch (constant for baselines)


def train_step(model, batch, optimizer, rng):
    """One optimization step on a batch of patch samples."""
    if len(batch) < 1:
        raise ConfigurationError("batch must contain at least one sample")
    dtype = dtype_for(model.precision)
    x, t = _batch_arrays(batch, dtype)
    grouped = _grouped_params(model)

    if model.kind == "moc":
        e, e_caches = models.forward_experts(model, x, mode="train", with_cache=True)
        g, g_cache = models.forward_gate(model, x, mode="train", rng=rng, with_cache=True)
        pred = BatchPrediction.from_outputs(g, e, t)
        l_expert = expert_loss(pred)
        breakdown = gating_loss(pred, model.lam)
        d_e = grad_expert_outputs(pred)
        d_g = grad_gate_probs(pred, model.lam)
        expert_grads = {}
        for i, net in enumerate(model.experts):
            for k, v in net.backward(e_caches[i], np.ascontiguousarray(d_e[:, i])).items():
                expert_grads[f"expert{i}.{k}"] = v
        gate_grads = {f"gate.{k}": v for k, v in model.gate.backward(g_cache, d_g).items()}
        optimizer.step("expert", grouped["expert"], expert_grads)
        optimizer.step("gate", grouped["gate"], gate_grads)
        return StepResult(l_expert, breakdown.mse, breakdown.penalty, breakdown.total,
                          g.mean(axis=0))

    if model.kind == "ordinary":
        y, cache = model.net.forward(x, mode="train", with_cache=True)
        r = y - t
        loss = float((r * r).mean())
        d_y = (2.0 / len(batch)) * r
        grads = {f"expert0.{k}": v for k, v in model.net.backward(cache, d_y).items()}
        optimizer.step("expert", grouped["expert"], grads)
        return StepResult(loss, loss, 0.0, loss, np.ones(1, dtype=dtype))

    if model.kind == "fc_gating":
        e, e_caches = models.forward_experts(model, x, mode="train", with_cache=True)
        from .layers import dense_backward, dense_forward

        out, c_fc = dense_forward(e, model.combiner.params["w"], model.combiner.params["b"])
        y = out[:, 0]
        r = y - t
        loss = float((r * r).mean())
        d_y = ((2.0 / len(batch)) * r)[:, None]
        d_e, dw, db = dense_backward(d_y, c_fc)
        grads = {}
        for i, net in enumerate(model.experts):
            for k, v in net.backward(e_caches[i], np.ascontiguousarray(d_e[:, i])).items():
                grads[f"expert{i}.{k}"] = v
        optimizer.step("expert", grouped["expert"], grads)
        optimizer.step("combiner", grouped["combiner"],
                       {"combiner.w": dw, "combiner.b": db})
        return StepResult(loss, loss, 0.0, loss,
                          model.combiner.params["w"][:, 0].copy())

    raise ConfigurationError(f"unknown model kind {model.kind!r}")


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    expert_loss: float
    gate_mse: float
    gate_penalty: float
    gate_entropy: float   # None when undefined (fc_gating combiner weights)
    mean_gate: np.ndarray


def gate_entropy(mean_gate):
    p = np.clip(np.asarray(mean_gate, dtype=np.float64), 1e-300, None)
    p = p / p.sum()
    return float(-(p * np.log(p)).sum()) + 0.0


def _shuffle_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), SHUFFLE_TAG, int(epoch)]))


def _dropout_rng(seed, epoch, step):
    return np.random.default_rng(np.random.SeedSequence([int(seed), DROPOUT_TAG, int(epoch), int(step)]))


def build_model(config: TrainingConfig):
    if config.variant == "moc":
        return models.build_moc(config.expert_config, config.gate_config,
                                config.num_experts, config.lam, config.seed, config.precision)
    if config.variant == "ordinary":
        return models.build_ordinary(config.expert_config, config.seed, config.precision)
    return models.build_fc_gating(config.expert_config, config.num_experts,
                                  config.seed, config.precision)


def train(config: TrainingConfig, dataset, model=None, optimizer=None, start_epoch=0,
          step_hook=None, state_out=None, resume_from=None):
    """Train for config.epochs over the dataset; returns (model, [EpochLog]).

    state_out persists the full training state (parameters, running stats,
    Adam moments, epoch counter) after the last epoch; resume_from restores
    it and continues, bitwise-identical to an unbroken run.
    """
    config.validate()
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    if resume_from is not None:
        model, optimizer, start_epoch = load_training_state(resume_from)
    if model is None:
        model = build_model(config)
    if optimizer is None:
        optimizer = DualOptimizer(config.optimizer)

    n = len(dataset)
    logs = []
    global_step = 0
    for epoch in range(start_epoch, config.epochs):
        order = _shuffle_rng(config.seed, epoch).permutation(n)
        sum_expert = sum_mse = sum_pen = 0.0
        sum_gate = None
        seen = 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            rng = _dropout_rng(config.seed, epoch, step)
            res = train_step(model, batch, optimizer, rng)
            if not (np.isfinite(res.expert_loss) and np.isfinite(res.gate_total)):
                max_param = max(float(np.max(np.abs(p))) for p in model.named_params().values())
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(expert={res.expert_loss}, gate={res.gate_total}, max|param|={max_param})",
                    step=global_step, expert_loss=res.expert_loss,
                    gate_loss=res.gate_total, max_param=max_param)
            b = len(batch)
            sum_expert += res.expert_loss * b
            sum_mse += res.gate_mse * b
            sum_pen += res.gate_penalty * b
            mg = np.asarray(res.mean_gate, dtype=np.float64) * b
            sum_gate = mg if sum_gate is None else sum_gate + mg
            seen += b
            global_step += 1
            if step_hook is not None:
                step_hook(epoch, step, res)
        mean_gate = sum_gate / seen
        entropy = gate_entropy(mean_gate) if model.kind != "fc_gating" else None
        logs.append(EpochLog(epoch=epoch, expert_loss=sum_expert / seen,
                             gate_mse=sum_mse / seen, gate_penalty=sum_pen / seen,
                             gate_entropy=entropy, mean_gate=mean_gate))
    if state_out is not None:
        save_training_state(model, optimizer, config.epochs, config, state_out)
    return model, logs


LOG_FLOAT = "{:.12g}".format


def log_header(num_experts):
    cols = ["epoch", "expert_loss", "gate_mse", "gate_penalty", "gate_entropy"]
    cols += [f"mean_g_{k}" for k in range(1, num_experts + 1)]
    return ",".join(cols)


def log_row(entry: EpochLog):
    cols = [str(entry.epoch), LOG_FLOAT(entry.expert_loss), LOG_FLOAT(entry.gate_mse),
            LOG_FLOAT(entry.gate_penalty),
            "" if entry.gate_entropy is None else LOG_FLOAT(entry.gate_entropy)]
    cols += [LOG_FLOAT(v) for v in entry.mean_gate]
    return ",".join(cols)


def write_log(path, logs, num_experts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(log_header(num_experts) + "\n")
        for entry in logs:
            fh.write(log_row(entry) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"MOCC"
FORMAT_VERSION = 1
_PRECISION_CODE = {"standard": 0, "high": 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_blob(path, tensors, config):
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = 0 if arr.dtype == np.float32 else 1
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.astype(_CODE_DTYPE[code], copy=False).tobytes()
    cfg = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_blob(path):
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a checkpoint)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPE:
            raise ShapeMismatchError(f"{path}: unknown precision code {code} for {name}")
        shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
        dt = _CODE_DTYPE[code]
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(size * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    (cfg_len,) = r.unpack("<I")
    cfg_raw = r.take(cfg_len).decode("utf-8")
    (stored_crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise ChecksumError(f"{path}: trailing bytes after checksum")
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    config = {}
    for line in cfg_raw.splitlines():
        if line:
            k, _, v = line.partition("=")
            config[k] = v
    return tensors, config


def _tuple_str(t):
    return ",".join(str(v) for v in t)


def _parse_tuple(s, conv):
    return tuple(conv(v) for v in s.split(",")) if s else ()


def _model_config_dict(model):
    ec = model.expert_config
    cfg = {
        "kind": model.kind,
        "num_experts": str(model.num_experts),
        "lambda": repr(float(model.lam)),
        "precision": model.precision,
        "expert.input_size": _tuple_str(ec.input_size),
        "expert.in_channels": str(ec.in_channels),
        "expert.conv_channels": _tuple_str(ec.conv_channels),
        "expert.kernel_sizes": _tuple_str(ec.kernel_sizes),
        "expert.strides": _tuple_str(ec.strides),
        "expert.pool_sizes": _tuple_str(ec.pool_sizes),
    }
    if model.kind == "moc":
        gc = model.gate_config
        cfg.update({
            "gate.conv_channels": _tuple_str(gc.conv_channels),
            "gate.kernel_sizes": _tuple_str(gc.kernel_sizes),
            "gate.strides": _tuple_str(gc.strides),
            "gate.pool_sizes": _tuple_str(gc.pool_sizes),
            "gate.hidden": str(gc.hidden),
            "gate.dropout_rate": repr(float(gc.dropout_rate)),
        })
    return cfg


def _model_tensors(model):
    tensors = dict(model.named_params())
    extra_cfg = {}
    for name, state in model.named_bn_states().items():
        tensors[f"bnstat.{name}.mean"] = state.mean
        tensors[f"bnstat.{name}.var"] = state.var
        extra_cfg[f"bncount.{name}"] = str(state.count)
    return tensors, extra_cfg


def save_checkpoint(model, path, extra_tensors=None, extra_config=None):
    tensors, cfg = _model_tensors(model)
    cfg.update(_model_config_dict(model))
    if extra_tensors:
        tensors.update(extra_tensors)
    if extra_config:
        cfg.update(extra_config)
    _write_blob(path, tensors, cfg)


def _expert_config_from(cfg):
    return models.ExpertNetConfig(
        input_size=_parse_tuple(cfg["expert.input_size"], int),
        in_channels=int(cfg["expert.in_channels"]),
        conv_channels=_parse_tuple(cfg["expert.conv_channels"], int),
        kernel_sizes=_parse_tuple(cfg["expert.kernel_sizes"], int),
        strides=_parse_tuple(cfg["expert.strides"], int),
        pool_sizes=_parse_tuple(cfg["expert.pool_sizes"], int),
    )


def _gate_config_from(cfg):
    return models.GatingNetConfig(
        conv_channels=_parse_tuple(cfg["gate.conv_channels"], int),
        kernel_sizes=_parse_tuple(cfg["gate.kernel_sizes"], int),
        strides=_parse_tuple(cfg["gate.strides"], int),
        pool_sizes=_parse_tuple(cfg["gate.pool_sizes"], int),
        hidden=int(cfg["gate.hidden"]),
        dropout_rate=float(cfg["gate.dropout_rate"]),
    )


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; bitwise round-trip of every tensor."""
    tensors, cfg = _read_blob(path)
    try:
        kind = cfg["kind"]
        precision = cfg["precision"]
        expert_config = _expert_config_from(cfg)
        num_experts = int(cfg["num_experts"])
        lam = float(cfg["lambda"])
    except KeyError as exc:
        raise ShapeMismatchError(f"{path}: missing config key {exc}")
    if kind == "moc":
        model = models.build_moc(expert_config, _gate_config_from(cfg), num_experts,
                                 lam, seed=0, precision=precision)
    elif kind == "ordinary":
        model = models.build_ordinary(expert_config, seed=0, precision=precision)
    elif kind == "fc_gating":
        model = models.build_fc_gating(expert_config, num_experts, seed=0, precision=precision)
    else:
        raise ShapeMismatchError(f"{path}: unknown model kind {kind!r}")
    params = model.named_params()
    for name, arr in params.items():
        if name not in tensors:
            raise ShapeMismatchError(f"{path}: missing tensor {name}")
        stored = tensors[name]
        if stored.shape != arr.shape:
            raise ShapeMismatchError(f"{path}: tensor {name} has shape {stored.shape}, expected {arr.shape}")
        if stored.dtype != arr.dtype:
            raise ShapeMismatchError(f"{path}: tensor {name} stored as {stored.dtype}, expected {arr.dtype}")
        arr[...] = stored
    for name, state in model.named_bn_states().items():
        try:
            state.mean[...] = tensors[f"bnstat.{name}.mean"]
            state.var[...] = tensors[f"bnstat.{name}.var"]
            state.count = int(cfg[f"bncount.{name}"])
        except KeyError as exc:
            raise ShapeMismatchError(f"{path}: missing batchnorm state {exc}")
    return model, cfg


def save_training_state(model, optimizer, next_epoch, train_config, path):
    """Model checkpoint plus optimizer moments and the resume epoch."""
    tensors = {}
    cfg = {"train.next_epoch": str(next_epoch),
           "train.seed": str(train_config.seed),
           "opt.eta_expert": repr(train_config.optimizer.eta_expert),
           "opt.eta_gate": repr(train_config.optimizer.eta_gate),
           "opt.beta1": repr(train_config.optimizer.beta1),
           "opt.beta2": repr(train_config.optimizer.beta2),
           "opt.eps": repr(train_config.optimizer.eps)}
    for group, state in optimizer.states.items():
        cfg[f"opt.t.{group}"] = str(state.t)
        for name, m in state.m.items():
            tensors[f"opt.m.{group}.{name}"] = m
            tensors[f"opt.v.{group}.{name}"] = state.v[name]
    save_checkpoint(model, path, extra_tensors=tensors, extra_config=cfg)


def load_training_state(path):
    """Returns (model, optimizer, next_epoch) ready to pass to train()."""
    model, cfg = load_checkpoint(path)
    tensors, _ = _read_blob(path)
    opt_config = OptimizerConfig(
        eta_expert=float(cfg["opt.eta_expert"]), eta_gate=float(cfg["opt.eta_gate"]),
        beta1=float(cfg["opt.beta1"]), beta2=float(cfg["opt.beta2"]), eps=float(cfg["opt.eps"]))
    optimizer = DualOptimizer(opt_config)
    for key, value in cfg.items():
        if key.startswith("opt.t."):
            group = key[len("opt.t."):]
            state = optimizer.states.setdefault(group, AdamState())
            state.t = int(value)
    for name, arr in tensors.items():
        if not name.startswith("opt.m.") and not name.startswith("opt.v."):
            continue
        slot, rest = name[4], name[6:]
        group, _, pname = rest.partition(".")
        state = optimizer.states.setdefault(group, AdamState())
        (state.m if slot == "m" else state.v)[pname] = arr
    return model, optimizer, int(cfg["train.next_epoch"])
