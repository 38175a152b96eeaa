"""Concrete network architectures.

Three model kinds share one small conv backbone (conv -> batchnorm -> ELU ->
maxpool, twice, valid convolution):

* CountingNet: backbone + dense(1); predicts one scalar count per patch. Used
  as the expert and, standalone, as the single-network baseline.
* GatingNet: a wider backbone + dense(hidden) -> ELU -> dropout -> dense(K)
  -> softmax; produces a probability row over the experts per patch.
* FcGatingModel: experts combined by one learned dense layer whose weights do
  not depend on the input image (the fixed-weights baseline).

Default sizes: expert conv 5x5x16 / 5x5x32 with pools 2 then 3 on 72x72
grayscale input, gate conv 5x5x32 / 5x5x64 with a 128-wide hidden layer and
dropout 0.5. All of it is configurable; weights are He-uniform, biases zero.
"""

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigurationError, ValidationError
from .moe import combine
from .tensor import dtype_for


@dataclass(frozen=True)
class ExpertNetConfig:
    input_size: tuple = (72, 72)
    in_channels: int = 1
    conv_channels: tuple = (16, 32)
    kernel_sizes: tuple = (5, 5)
    strides: tuple = (1, 1)
    pool_sizes: tuple = (2, 3)


@dataclass(frozen=True)
class GatingNetConfig:
    conv_channels: tuple = (32, 64)
    kernel_sizes: tuple = (5, 5)
    strides: tuple = (1, 1)
    pool_sizes: tuple = (2, 3)
    hidden: int = 128
    dropout_rate: float = 0.5


def conv_stack_shape(input_size, in_channels, conv_channels, kernel_sizes, strides, pool_sizes):
    """Trace (C, H, W) through the conv/pool stack, or raise if it collapses."""
    h, w = input_size
    c = in_channels
    for f, k, s, p in zip(conv_channels, kernel_sizes, strides, pool_sizes):
        if k > h or k > w:
            raise ConfigurationError(f"kernel {k} does not fit {h}x{w} feature map")
        h = (h - k) // s + 1
        w = (w - k) // s + 1
        h //= p
        w //= p
        if h < 1 or w < 1:
            raise ConfigurationError("conv/pool stack reduces spatial size below 1")
        c = f
    return c, h, w


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _ConvStack:
    """Shared backbone: (conv -> batchnorm -> ELU -> maxpool) per block."""

    def __init__(self, cfg_in_size, in_channels, conv_channels, kernel_sizes, strides, pool_sizes, rng, dtype):
        self.strides = tuple(strides)
        self.pool_sizes = tuple(pool_sizes)
        self.out_shape = conv_stack_shape(cfg_in_size, in_channels, conv_channels, kernel_sizes, strides, pool_sizes)
        self.params = {}
        self.bn_states = {}
        c = in_channels
        for i, (f, k) in enumerate(zip(conv_channels, kernel_sizes), start=1):
            self.params[f"conv{i}.w"] = he_uniform(rng, (f, c, k, k), c * k * k, dtype)
            self.params[f"conv{i}.b"] = np.zeros(f, dtype=dtype)
            self.params[f"bn{i}.gamma"] = np.ones(f, dtype=dtype)
            self.params[f"bn{i}.beta"] = np.zeros(f, dtype=dtype)
            self.bn_states[f"bn{i}"] = layers.BatchNormState(f, dtype)
            c = f
        self.n_blocks = len(self.strides)

    def forward(self, x, mode):
        caches = []
        h = x
        for i in range(1, self.n_blocks + 1):
            h, c_conv = layers.conv2d_forward(
                h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], self.strides[i - 1]
            )
            h, c_bn = layers.batchnorm2d_forward(
                h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"], self.bn_states[f"bn{i}"], mode
            )
            h, c_elu = layers.elu_forward(h)
            h, c_pool = layers.maxpool2d_forward(h, self.pool_sizes[i - 1])
            caches.append((c_conv, c_bn, c_elu, c_pool))
        return h, caches

    def backward(self, dy, caches, grads):
        dh = dy
        for i in range(self.n_blocks, 0, -1):
            c_conv, c_bn, c_elu, c_pool = caches[i - 1]
            dh = layers.maxpool2d_backward(dh, c_pool)
            dh = layers.elu_backward(dh, c_elu)
            dh, dgamma, dbeta = layers.batchnorm2d_backward(dh, c_bn)
            dh, dw, db = layers.conv2d_backward(dh, c_conv)
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return dh


class CountingNet:
    """Backbone plus a single-output dense head; one scalar count per sample."""

    def __init__(self, config: ExpertNetConfig, rng, dtype):
        self.config = config
        self.dtype = dtype
        self.stack = _ConvStack(
            config.input_size, config.in_channels, config.conv_channels,
            config.kernel_sizes, config.strides, config.pool_sizes, rng, dtype,
        )
        c, h, w = self.stack.out_shape
        flat = c * h * w
        self.params = self.stack.params
        self.params["fc.w"] = he_uniform(rng, (flat, 1), flat, dtype)
        self.params["fc.b"] = np.zeros(1, dtype=dtype)
        self.bn_states = self.stack.bn_states

    def _check_input(self, x):
        hf, wf = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2] != hf or x.shape[3] != wf:
            raise ValidationError(
                f"expected batch of shape (N, {self.config.in_channels}, {hf}, {wf}), got {x.shape}"
            )

    def forward(self, x, mode="eval", with_cache=False):
        self._check_input(x)
        h, stack_caches = self.stack.forward(x, mode)
        flat = h.reshape(h.shape[0], -1)
        out, c_fc = layers.dense_forward(flat, self.params["fc.w"], self.params["fc.b"])
        y = out[:, 0]
        if with_cache:
            return y, (stack_caches, c_fc, h.shape)
        return y

    def backward(self, caches, d_out):
        """d_out: (N,) gradient on the scalar outputs. Returns grads dict."""
        stack_caches, c_fc, conv_shape = caches
        grads = {}
        dflat, dw, db = layers.dense_backward(d_out[:, None], c_fc)
        grads["fc.w"] = dw
        grads["fc.b"] = db
        self.stack.backward(dflat.reshape(conv_shape), stack_caches, grads)
        return grads


class GatingNet:
    """Backbone plus two dense layers with dropout between, softmax output."""

    def __init__(self, config: GatingNetConfig, input_size, in_channels, num_experts, rng, dtype):
        self.config = config
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        self.num_experts = num_experts
        self.dtype = dtype
        self.stack = _ConvStack(
            input_size, in_channels, config.conv_channels,
            config.kernel_sizes, config.strides, config.pool_sizes, rng, dtype,
        )
        c, h, w = self.stack.out_shape
        flat = c * h * w
        self.params = self.stack.params
        self.params["fc1.w"] = he_uniform(rng, (flat, config.hidden), flat, dtype)
        self.params["fc1.b"] = np.zeros(config.hidden, dtype=dtype)
        self.params["fc2.w"] = he_uniform(rng, (config.hidden, num_experts), config.hidden, dtype)
        self.params["fc2.b"] = np.zeros(num_experts, dtype=dtype)
        self.bn_states = self.stack.bn_states

    def forward(self, x, mode="eval", rng=None, with_cache=False):
        if x.ndim != 4 or x.shape[2:] != self.input_size or x.shape[1] != self.in_channels:
            raise ValidationError(
                f"expected batch of shape (N, {self.in_channels}, {self.input_size[0]}, "
                f"{self.input_size[1]}), got {x.shape}"
            )
        h, stack_caches = self.stack.forward(x, mode)
        conv_shape = h.shape
        flat = h.reshape(h.shape[0], -1)
        h1, c_fc1 = layers.dense_forward(flat, self.params["fc1.w"], self.params["fc1.b"])
        a1, c_elu = layers.elu_forward(h1)
        d1, c_drop = layers.dropout_forward(a1, self.config.dropout_rate, mode, rng)
        z, c_fc2 = layers.dense_forward(d1, self.params["fc2.w"], self.params["fc2.b"])
        g, c_soft = layers.softmax_forward(z)
        if with_cache:
            return g, (stack_caches, conv_shape, c_fc1, c_elu, c_drop, c_fc2, c_soft)
        return g

    def backward(self, caches, d_probs):
        """d_probs: (N, K) gradient on the softmax outputs. Returns grads dict."""
        stack_caches, conv_shape, c_fc1, c_elu, c_drop, c_fc2, c_soft = caches
        grads = {}
        dz = layers.softmax_backward(d_probs, c_soft)
        dd1, dw2, db2 = layers.dense_backward(dz, c_fc2)
        grads["fc2.w"] = dw2
        grads["fc2.b"] = db2
        da1 = layers.dropout_backward(dd1, c_drop)
        dh1 = layers.elu_backward(da1, c_elu)
        dflat, dw1, db1 = layers.dense_backward(dh1, c_fc1)
        grads["fc1.w"] = dw1
        grads["fc1.b"] = db1
        self.stack.backward(dflat.reshape(conv_shape), stack_caches, grads)
        return grads


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class MoCModel:
    num_experts: int
    lam: float
    expert_config: ExpertNetConfig
    gate_config: GatingNetConfig
    precision: str
    experts: list = field(default_factory=list)
    gate: GatingNet = None

    kind = "moc"

    def param_groups(self):
        """(group, prefix, net) triples covering every trainable sub-network."""
        out = [("expert", f"expert{i}.", net) for i, net in enumerate(self.experts)]
        out.append(("gate", "gate.", self.gate))
        return out

    def named_params(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.params.items()}

    def named_bn_states(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.bn_states.items()}

    def predict_batch(self, x):
        e = forward_experts(self, x, mode="eval")
        g = forward_gate(self, x, mode="eval")
        return combine(g, e)


@dataclass
class OrdinaryModel:
    """Single counting network; its raw scalar output is the prediction."""

    expert_config: ExpertNetConfig
    precision: str
    net: CountingNet = None

    kind = "ordinary"
    lam = 0.0
    num_experts = 1

    def param_groups(self):
        return [("expert", "expert0.", self.net)]

    def named_params(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.params.items()}

    def named_bn_states(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.bn_states.items()}

    def predict_batch(self, x):
        return self.net.forward(x, mode="eval")


class _Combiner:
    """Dense 1-layer container so FcGatingModel fits the param-group protocol."""

    def __init__(self, num_experts, rng, dtype):
        self.params = {
            "w": he_uniform(rng, (num_experts, 1), num_experts, dtype),
            "b": np.zeros(1, dtype=dtype),
        }
        self.bn_states = {}


@dataclass
class FcGatingModel:
    """Experts combined by one dense layer with input-independent weights."""

    num_experts: int
    expert_config: ExpertNetConfig
    precision: str
    experts: list = field(default_factory=list)
    combiner: _Combiner = None

    kind = "fc_gating"
    lam = 0.0

    def param_groups(self):
        out = [("expert", f"expert{i}.", net) for i, net in enumerate(self.experts)]
        out.append(("combiner", "combiner.", self.combiner))
        return out

    def named_params(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.params.items()}

    def named_bn_states(self):
        return {prefix + k: v for _, prefix, net in self.param_groups() for k, v in net.bn_states.items()}

    def combine_experts(self, e):
        out, _ = layers.dense_forward(e, self.combiner.params["w"], self.combiner.params["b"])
        return out[:, 0]

    def predict_batch(self, x):
        e = forward_experts(self, x, mode="eval")
        return self.combine_experts(e)


# ---------------------------------------------------------------------------
# builders and batch forwards
# ---------------------------------------------------------------------------

def _expert_rngs(seed, count):
    # expert i always draws from spawn child i, so a K=1 mixture, the
    # single-network baseline and expert 0 of any larger mixture share
    # bitwise-identical initial weights for the same seed
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(c) for c in children]


def build_moc(expert_config, gate_config, num_experts, lam, seed, precision="standard"):
    if num_experts < 1:
        raise ConfigurationError("mixture needs at least one expert")
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    dtype = dtype_for(precision)
    rngs = _expert_rngs(seed, num_experts + 1)
    experts = [CountingNet(expert_config, rngs[i], dtype) for i in range(num_experts)]
    gate = GatingNet(gate_config, expert_config.input_size, expert_config.in_channels,
                     num_experts, rngs[num_experts], dtype)
    return MoCModel(num_experts=num_experts, lam=lam, expert_config=expert_config,
                    gate_config=gate_config, precision=precision, experts=experts, gate=gate)


def build_ordinary(expert_config, seed, precision="standard"):
    dtype = dtype_for(precision)
    rng = _expert_rngs(seed, 1)[0]
    return OrdinaryModel(expert_config=expert_config, precision=precision,
                         net=CountingNet(expert_config, rng, dtype))


def build_fc_gating(expert_config, num_experts, seed, precision="standard"):
    if num_experts < 1:
        raise ConfigurationError("mixture needs at least one expert")
    dtype = dtype_for(precision)
    rngs = _expert_rngs(seed, num_experts + 1)
    experts = [CountingNet(expert_config, rngs[i], dtype) for i in range(num_experts)]
    combiner = _Combiner(num_experts, rngs[num_experts], dtype)
    return FcGatingModel(num_experts=num_experts, expert_config=expert_config,
                         precision=precision, experts=experts, combiner=combiner)


def forward_experts(model, batch, mode="eval", with_cache=False):
    """Evaluate every expert on the batch; column k holds expert k's counts."""
    outs = []
    caches = []
    for net in model.experts:
        if with_cache:
            y, c = net.forward(batch, mode=mode, with_cache=True)
            caches.append(c)
        else:
            y = net.forward(batch, mode=mode)
        outs.append(y)
    e = np.stack(outs, axis=1)
    if with_cache:
        return e, caches
    return e


def forward_gate(model, batch, mode="eval", rng=None, with_cache=False):
    """Evaluate the gating network; each row is a probability vector."""
    return model.gate.forward(batch, mode=mode, rng=rng, with_cache=with_cache)
