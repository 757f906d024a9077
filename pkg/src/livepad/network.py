"""Residual CNN builder: stem, residual stages, pooled embedding, cosine head.

Each residual block computes ``act(bn(conv(act(bn(conv(x))))) + shortcut(x))``
with a 1x1 projection (conv + bn) whenever channels or stride change. After
the last stage a global average pool feeds a dense layer whose output is the
embedding. Class probabilities are the softmax of the scaled cosine logits of
the network's ArcFace head with the margin removed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .losses import ArcFaceHead, cosine_logits
from .tensor import ConfigurationError, DimensionError

LIVE = 0
SPOOF = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple = (1, 32, 32)
    stem_channels: int = 8
    # (blocks, channels, stride) per stage
    stages: tuple = ((1, 8, 2), (1, 16, 2))
    activation: str = "leaky_relu"
    negative_slope: float = 0.01
    embedding_dim: int = 16
    classes: int = 2
    stem_kernel: int = 3
    stem_stride: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.negative_slope < 1.0:
            raise ConfigurationError("negative_slope must lie in [0, 1)")
        if self.stem_channels < 1 or self.embedding_dim < 1 or self.classes < 2:
            raise ConfigurationError("stem_channels, embedding_dim must be >= 1 and classes >= 2")
        for i, (blocks, channels, stride) in enumerate(self.stages, 1):
            if blocks < 1 or channels < 1:
                raise ConfigurationError(f"stage {i}: blocks and channels must be positive")
            if stride not in (1, 2):
                raise ConfigurationError(f"stage {i}: stride must be 1 or 2, got {stride}")

    def to_dict(self):
        c, h, w = self.input_shape
        return {
            "activation": self.activation,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
            "classes": self.classes,
            "embedding_dim": self.embedding_dim,
            "input": f"{c}x{h}x{w}",
            "negative_slope": self.negative_slope,
            "stages": ",".join(f"{b}x{ch}/{s}" for b, ch, s in self.stages),
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, d):
        stages = []
        for part in str(d["stages"]).split(","):
            bc, stride = part.split("/")
            blocks, channels = bc.split("x")
            stages.append((int(blocks), int(channels), int(stride)))
        return cls(
            input_shape=tuple(int(v) for v in str(d["input"]).split("x")),
            stem_channels=int(d["stem_channels"]),
            stages=tuple(stages),
            activation=str(d["activation"]),
            negative_slope=float(d["negative_slope"]),
            embedding_dim=int(d["embedding_dim"]),
            classes=int(d["classes"]),
            stem_kernel=int(d["stem_kernel"]),
            stem_stride=int(d["stem_stride"]),
            bn_eps=float(d["bn_eps"]),
            bn_momentum=float(d["bn_momentum"]),
        )


def desk_preset(**overrides):
    return NetworkConfig(**overrides)


def paper_preset(**overrides):
    """ResNet-18 layout at 3 x 1024 x 1024 (shape checks only; too big to train here)."""
    cfg = dict(
        input_shape=(3, 1024, 1024),
        stem_channels=64,
        stages=((2, 64, 2), (2, 128, 2), (2, 256, 2), (2, 512, 2)),
        embedding_dim=512,
        stem_kernel=7,
        stem_stride=2,
    )
    cfg.update(overrides)
    return NetworkConfig(**cfg)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def layer_plan(config):
    """Ordered list of (name, kind, args) describing every parameterized layer."""
    c_in, h, w = config.input_shape
    k = config.stem_kernel
    pad = k // 2
    h, w = _out(h, k, config.stem_stride, pad), _out(w, k, config.stem_stride, pad)
    if h < 1 or w < 1:
        raise ConfigurationError(f"stem collapses {config.input_shape[1:]} to {h}x{w}")
    plan = [("stem", "convbn", (c_in, config.stem_channels, k, config.stem_stride))]
    c = config.stem_channels
    for si, (blocks, channels, stride) in enumerate(config.stages, 1):
        for bi in range(1, blocks + 1):
            s = stride if bi == 1 else 1
            if s > 1 and (h < s or w < s):
                raise ConfigurationError(
                    f"stage {si}: stride {s} applied to a {h}x{w} map collapses the spatial extent"
                )
            h2, w2 = _out(h, 3, s, 1), _out(w, 3, s, 1)
            if h2 < 1 or w2 < 1:
                raise ConfigurationError(f"stage {si}: spatial extent collapses to {h2}x{w2}")
            name = f"stage{si}.block{bi}"
            plan.append((name, "block", (c, channels, s, c != channels or s != 1)))
            c, h, w = channels, h2, w2
    plan.append(("embed", "dense", (c, config.embedding_dim)))
    plan.append(("head", "head", (config.embedding_dim, config.classes)))
    return plan, (c, h, w)


def parameter_shapes(config):
    shapes = {}
    plan, _ = layer_plan(config)
    for name, kind, args in plan:
        if kind == "convbn":
            c_in, c_out, k, _ = args
            shapes[f"{name}.conv.w"] = (c_out, c_in, k, k)
            shapes[f"{name}.bn.gamma"] = (c_out,)
            shapes[f"{name}.bn.beta"] = (c_out,)
        elif kind == "block":
            c_in, c_out, _, project = args
            shapes[f"{name}.conv1.w"] = (c_out, c_in, 3, 3)
            shapes[f"{name}.bn1.gamma"] = (c_out,)
            shapes[f"{name}.bn1.beta"] = (c_out,)
            shapes[f"{name}.conv2.w"] = (c_out, c_out, 3, 3)
            shapes[f"{name}.bn2.gamma"] = (c_out,)
            shapes[f"{name}.bn2.beta"] = (c_out,)
            if project:
                shapes[f"{name}.proj.w"] = (c_out, c_in, 1, 1)
                shapes[f"{name}.projbn.gamma"] = (c_out,)
                shapes[f"{name}.projbn.beta"] = (c_out,)
        elif kind == "dense":
            d_in, d_out = args
            shapes[f"{name}.w"] = (d_in, d_out)
            shapes[f"{name}.b"] = (d_out,)
        else:
            shapes[f"{name}.w"] = args
    return shapes


@dataclass
class Network:
    config: NetworkConfig
    params: dict
    bn_state: dict
    head: ArcFaceHead
    plan: list = field(repr=False, default_factory=list)

    def parameters(self):
        """Trainable tensors in a fixed order (network params, then head weights)."""
        return [self.params[k] for k in self.params] + [self.head.weights]

    def named_tensors(self):
        out = {k: v.data for k, v in self.params.items()}
        out["head.w"] = self.head.weights.data
        for name, st in self.bn_state.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def build(config, seed=0, s=30.0, m=0.3):
    """Instantiate parameters deterministically from ``seed``.

    Conv and dense weights use He (fan-in) normal initialization; batch-norm
    gamma = 1, beta = 0; dense biases zero; head columns unit-normalized.
    """
    plan, _ = layer_plan(config)
    rng = np.random.default_rng(seed)
    params, bn_state = {}, {}
    for name, shape in parameter_shapes(config).items():
        if name == "head.w":
            continue
        if name.endswith(".gamma"):
            arr = np.ones(shape)
            bn_state[name[: -len(".gamma")]] = T.BatchNormState(
                shape[0], config.bn_momentum, config.bn_eps
            )
        elif name.endswith(".beta") or name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = T.Tensor(arr, requires_grad=True)
    head = ArcFaceHead(rng.standard_normal((config.embedding_dim, config.classes)), s=s, m=m)
    return Network(config=config, params=params, bn_state=bn_state, head=head, plan=plan)


def _convbn(net, name, x, stride, pad, mode, conv="conv", bn="bn"):
    p = net.params
    y = T.conv2d(x, p[f"{name}.{conv}.w"], stride=stride, pad=pad)
    key = f"{name}.{bn}"
    return T.batchnorm2d(y, p[f"{key}.gamma"], p[f"{key}.beta"], net.bn_state[key], mode)


def _act(net, x):
    cfg = net.config
    return T.activation(x, cfg.activation, cfg.negative_slope)


def features(net, batch, mode="train"):
    """Pre-pool feature map of the last stage."""
    cfg = net.config
    x = T.as_tensor(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input {cfg.input_shape}")
    for name, kind, args in net.plan:
        if kind == "convbn":
            k, stride = args[2], args[3]
            x = _act(net, _convbn(net, name, x, stride, k // 2, mode))
        elif kind == "block":
            _, _, stride, project = args
            h = _act(net, _convbn(net, name, x, stride, 1, mode, "conv1", "bn1"))
            h = _convbn(net, name, h, 1, 1, mode, "conv2", "bn2")
            short = _convbn(net, name, x, stride, 0, mode, "proj", "projbn") if project else x
            x = _act(net, h + short)
    return x


def pool_embed(net, fmap):
    """Global average pool then the dense embedding layer."""
    pooled = fmap.mean(axis=(2, 3))
    return pooled @ net.params["embed.w"] + net.params["embed.b"]


def probabilities(net, emb):
    return T.softmax(cosine_logits(emb, net.head) * net.head.s, axis=1)


def embed(net, batch, mode="train"):
    return pool_embed(net, features(net, batch, mode))


def forward(net, batch, mode="train"):
    """Returns ``(embedding [B x D], probs [B x classes])``."""
    emb = embed(net, batch, mode)
    return emb, probabilities(net, emb)


def score_embeddings(embeddings, head):
    """Live-class probability from margin-free scaled cosine logits."""
    with T.no_grad():
        probs = T.softmax(cosine_logits(embeddings, head) * head.s, axis=1)
    return probs.data[:, LIVE].copy()


def embed_batches(net, images, batch_size=256):
    """Eval-mode embeddings for an (n, C, H, W) array, computed in chunks."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(embed(net, images[i : i + batch_size], mode="eval").data)
    if not out:
        return np.zeros((0, net.config.embedding_dim))
    return np.concatenate(out, axis=0)


def score(net, images, head=None, batch_size=256):
    """Bona fide score in [0, 1] per sample (eval mode, deterministic)."""
    head = net.head if head is None else head
    return score_embeddings(embed_batches(net, images, batch_size), head)


# ---------------------------------------------------------------------------
# checkpoints


def save(path, net, extra=None):
    header = {f"net.{k}": v for k, v in net.config.to_dict().items()}
    header["head.s"] = net.head.s
    header["head.m"] = net.head.m
    if extra:
        header.update(extra)
    checkpoint.write(path, header, net.named_tensors())


def load(path):
    """Returns ``(network, header)``."""
    header, tensors = checkpoint.read(path)
    cfg = NetworkConfig.from_dict(
        {k[4:]: v for k, v in header.items() if k.startswith("net.")}
    )
    net = build(cfg, seed=0, s=float(header["head.s"]), m=float(header["head.m"]))
    for name, p in net.params.items():
        p.data = tensors[name].copy()
    net.head.weights.data = tensors["head.w"].copy()
    for name, st in net.bn_state.items():
        st.running_mean = tensors[f"{name}.running_mean"].copy()
        st.running_var = tensors[f"{name}.running_var"].copy()
    return net, header
