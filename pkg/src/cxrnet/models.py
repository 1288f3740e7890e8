"""ResNet variants, the non-image MLP baseline and frozen-feature probes.

All networks share the :class:`Network` surface: ordered named parameters,
batch-norm buffers, per-parameter trainable flags, ``logits`` and
``forward``. Parameter names follow ``stage.block.layer.kind`` and do not
depend on the seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cxrnet import functional as F
from cxrnet.errors import ConfigError, ShapeError, UsageError
from cxrnet.tensor import DTYPE, Tensor, no_grad

NUM_LABELS = 15
META_DIM = 3
DEPTH_BLOCKS = {38: (2, 2, 3, 3), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
FREEZE_POLICIES = ("none", "off_the_shelf", "fine_tune")
STANDARD_INPUT_SIZES = (224, 448)


@dataclass(frozen=True)
class ModelConfig:
    """Declarative ResNet description.

    ``width`` is the stem/conv2 channel count (64 in every standard variant);
    reduced widths exist for desk-scale runs. Input sizes other than 224 and
    448 are accepted when divisible by the network's total stride.
    """

    depth: int = 50
    input_channels: int = 1
    input_size: int = 224
    extra_pool_after_conv2: bool = False
    use_meta: bool = False
    num_labels: int = NUM_LABELS
    freeze: str = "none"
    width: int = 64

    def violations(self) -> list[str]:
        problems = []
        if self.depth not in DEPTH_BLOCKS:
            problems.append(f"depth must be one of {sorted(DEPTH_BLOCKS)}, got {self.depth}")
        if self.input_channels not in (1, 3):
            problems.append(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.num_labels != NUM_LABELS:
            problems.append(f"num_labels must be {NUM_LABELS}, got {self.num_labels}")
        if self.freeze not in FREEZE_POLICIES:
            problems.append(f"freeze must be one of {FREEZE_POLICIES}, got {self.freeze!r}")
        if self.width < 1:
            problems.append(f"width must be positive, got {self.width}")
        if self.input_size == 448 and not self.extra_pool_after_conv2:
            problems.append("input_size=448 requires extra_pool_after_conv2=True (the -large variant)")
        stride = self.total_stride
        if self.input_size < stride or self.input_size % stride:
            problems.append(f"input_size {self.input_size} must be a positive multiple of {stride}")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))
        return self

    @property
    def total_stride(self) -> int:
        return 64 if self.extra_pool_after_conv2 else 32

    @property
    def blocks(self) -> tuple[int, int, int, int]:
        return DEPTH_BLOCKS[self.depth]

    @property
    def feature_dim(self) -> int:
        return self.width * 32

    @property
    def final_grid(self) -> int:
        return self.input_size // self.total_stride

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        """Named standard setups, e.g. ``"resnet50-large-meta"`` or ``"resnet50-ots"``."""
        parts = name.lower().split("-")
        if not parts[0].startswith("resnet"):
            raise ConfigError(f"unknown variant {name!r}")
        kw: dict = {"depth": int(parts[0][len("resnet"):] or 50)}
        tags = set(parts[1:])
        if "large" in tags:
            kw.update(input_size=448, extra_pool_after_conv2=True, input_channels=1)
        if "1channel" in tags:
            kw.update(input_channels=1)
        if "ots" in tags:
            kw.update(input_channels=3, freeze="off_the_shelf")
        if "ft" in tags:
            kw.update(input_channels=3, freeze="fine_tune")
        if "meta" in tags:
            kw.update(use_meta=True)
        kw.update(overrides)
        return cls(**kw).validate()


@dataclass
class MetaFeatures:
    """Non-image inputs: linearly scaled age, gender (M=1) and view position (AP=1)."""

    age_scaled: float
    gender: int
    view_position: int

    def __post_init__(self):
        if not 0.0 <= self.age_scaled <= 1.0:
            raise ValueError(f"age_scaled must lie in [0, 1], got {self.age_scaled}")
        if self.gender not in (0, 1) or self.view_position not in (0, 1):
            raise ValueError("gender and view_position are encoded as 0 or 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.age_scaled, self.gender, self.view_position], dtype=DTYPE)


def meta_array(meta) -> np.ndarray:
    if meta is None:
        return None
    if isinstance(meta, np.ndarray):
        arr = meta.astype(DTYPE, copy=False)
    elif isinstance(meta, Tensor):
        arr = meta.data
    else:
        arr = np.stack([m.as_array() if isinstance(m, MetaFeatures) else np.asarray(m, DTYPE) for m in meta])
    if arr.ndim != 2 or arr.shape[1] != META_DIM:
        raise ShapeError(f"meta batch must be [N, {META_DIM}], got {arr.shape}")
    return arr


# ---------------------------------------------------------------- layers


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class ConvBN:
    """Convolution followed by batch normalization (no bias, no activation)."""

    def __init__(self, name: str, cin: int, cout: int, kernel: int, stride: int, rng: np.random.Generator):
        self.name = name
        self.stride = stride
        self.kernel = kernel
        self.weight = Tensor(_he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel), True, f"{name}.weight")
        self.gamma = Tensor(np.ones(cout, DTYPE), True, f"{name}.gamma")
        self.beta = Tensor(np.zeros(cout, DTYPE), True, f"{name}.beta")
        self.bn = F.BatchNormState.fresh(cout)
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.running_mean": self.bn.running_mean,
            f"{self.name}.running_var": self.bn.running_var,
            f"{self.name}.tracked": np.array([self.bn.tracked], dtype=DTYPE),
        }

    def load_buffer(self, kind: str, value: np.ndarray) -> None:
        if kind == "running_mean":
            self.bn.running_mean = value.astype(DTYPE).copy()
        elif kind == "running_var":
            self.bn.running_var = value.astype(DTYPE).copy()
        elif kind == "tracked":
            self.bn.tracked = int(value.reshape(-1)[0])
        else:
            raise KeyError(kind)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = F.conv2d(x, self.weight, stride=self.stride, padding="auto")
        # a frozen layer behaves as a fixed feature extractor: running statistics, no updates
        return F.batchnorm2d(h, self.gamma, self.beta, self.bn, training and not self.frozen)

    def output_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expects {self.weight.shape[1]} channels, got {c}")
        return (
            self.weight.shape[0],
            F.conv_output_size(h, self.kernel, self.stride),
            F.conv_output_size(w, self.kernel, self.stride),
        )


class Bottleneck:
    """1x1 reduce, 3x3, 1x1 expand with identity or projection shortcut.

    The down-sampling stride sits on the 1x1 reduce convolution.
    """

    def __init__(self, name: str, cin: int, mid: int, stride: int, rng: np.random.Generator):
        cout = 4 * mid
        self.name = name
        self.reduce = ConvBN(f"{name}.reduce", cin, mid, 1, stride, rng)
        self.spatial = ConvBN(f"{name}.spatial", mid, mid, 3, 1, rng)
        self.expand = ConvBN(f"{name}.expand", mid, cout, 1, 1, rng)
        self.shortcut = ConvBN(f"{name}.shortcut", cin, cout, 1, stride, rng) if (stride != 1 or cin != cout) else None

    @property
    def units(self) -> list[ConvBN]:
        units = [self.reduce, self.spatial, self.expand]
        return units + [self.shortcut] if self.shortcut is not None else units

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = F.relu(self.reduce(x, training))
        h = F.relu(self.spatial(h, training))
        h = self.expand(h, training)
        skip = self.shortcut(x, training) if self.shortcut is not None else x
        return F.relu(F.add(h, skip))

    def output_shape(self, shape):
        out = self.expand.output_shape(self.spatial.output_shape(self.reduce.output_shape(shape)))
        if self.shortcut is not None:
            if self.shortcut.output_shape(shape) != out:
                raise ShapeError(f"{self.name}: shortcut and residual shapes disagree")
        elif shape != out:
            raise ShapeError(f"{self.name}: identity shortcut with shape change {shape} -> {out}")
        return out


class MaxPool:
    def __init__(self, name: str, kernel: int = 3, stride: int = 2):
        self.name, self.kernel, self.stride = name, kernel, stride

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.maxpool2d(x, self.kernel, self.stride, padding="auto")

    def output_shape(self, shape):
        c, h, w = shape
        return (c, F.conv_output_size(h, self.kernel, self.stride), F.conv_output_size(w, self.kernel, self.stride))


class Dense:
    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator, he: bool = True):
        self.name = name
        scale = np.sqrt(2.0 / din) if he else np.sqrt(1.0 / din)
        self.weight = Tensor((rng.standard_normal((din, dout)) * scale).astype(DTYPE), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(dout, DTYPE), True, f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


# ---------------------------------------------------------------- networks


class Network:
    """Common parameter bookkeeping."""

    kind = "network"
    output_activation = "sigmoid"
    loss = "bce"

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def _register(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            if t.name in self._params:
                raise ConfigError(f"duplicate parameter name {t.name}")
            self._params[t.name] = t
            self._trainable[t.name] = True

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def trainable(self) -> dict[str, bool]:
        return dict(self._trainable)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._params.items() if self._trainable[k]}

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in canonical order."""
        state = {k: t.data for k, t in self._params.items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = [k for k in own if k not in state]
            if missing:
                raise KeyError(f"state is missing {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        for name, value in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected entry {name}")
                continue
            if tuple(value.shape) != tuple(own[name].shape):
                raise ShapeError(f"{name}: shape {tuple(value.shape)} does not match {tuple(own[name].shape)}")
            if name in self._params:
                self._params[name].data = np.array(value, dtype=DTYPE, copy=True)
            else:
                self.load_buffer(name, np.asarray(value))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: np.array(v, copy=True) for k, v in self.state_dict().items()}

    def logits(self, images, meta=None, training: bool = False) -> Tensor:
        raise NotImplementedError

    def forward(self, images, meta=None, training: bool = False) -> Tensor:
        z = self.logits(images, meta, training)
        return F.sigmoid(z) if self.output_activation == "sigmoid" else z

    __call__ = forward

    def predict(self, images, meta=None, batch_size: int = 32) -> np.ndarray:
        """Eval-mode outputs as a numpy array, computed without recording a graph."""
        n = len(images) if images is not None else len(meta)
        outs = []
        with no_grad():
            for i in range(0, n, batch_size):
                sl = slice(i, i + batch_size)
                outs.append(self.forward(
                    None if images is None else images[sl], None if meta is None else meta[sl], training=False).data)
        return np.concatenate(outs, axis=0)


class ResNet(Network):
    """Bottleneck ResNet with a 15-way sigmoid head and optional meta fusion."""

    kind = "resnet"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = config.width
        self.stem = ConvBN("conv1.0.stem", config.input_channels, w, 7, 2, rng)
        self.pool1 = MaxPool("pooling1")
        self.stages: list[list[Bottleneck]] = []
        cin = w
        for s, count in enumerate(config.blocks):
            mid = w * 2**s
            stage = []
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(Bottleneck(f"conv{s + 2}.{b}", cin, mid, stride, rng))
                cin = 4 * mid
            self.stages.append(stage)
        self.extra_pool = MaxPool("pooling_extra") if config.extra_pool_after_conv2 else None
        head_in = config.feature_dim + (META_DIM if config.use_meta else 0)
        self.head = Dense("head.0.dense", head_in, config.num_labels, rng)

        self._register(self.stem.parameters())
        for unit in self.conv_units():
            if unit is not self.stem:
                self._register(unit.parameters())
        self._register(self.head.parameters())
        self.apply_freeze(config.freeze)

    # -- structure

    def conv_units(self) -> list[ConvBN]:
        units = [self.stem]
        for stage in self.stages:
            for block in stage:
                units.extend(block.units)
        return units

    def head_parameter_names(self) -> list[str]:
        return [self.head.weight.name, self.head.bias.name]

    def block_counts(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.stages)

    def apply_freeze(self, policy: str) -> None:
        if policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {policy!r}")
        head = set(self.head_parameter_names())
        frozen = policy == "off_the_shelf"
        for name in self._params:
            self.set_trainable(name, name in head or not frozen)
        for unit in self.conv_units():
            unit.frozen = frozen

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for unit in self.conv_units():
            out.update(unit.buffers())
        return out

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, kind = name.rsplit(".", 1)
        for unit in self.conv_units():
            if unit.name == prefix:
                unit.load_buffer(kind, value)
                return
        raise KeyError(name)

    def layer_sequence(self) -> list[tuple[str, object]]:
        seq: list[tuple[str, object]] = [("conv1", self.stem), ("pooling1", self.pool1)]
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                seq.append((block.name, block))
            if s == 0 and self.extra_pool is not None:
                seq.append(("pooling_extra", self.extra_pool))
        return seq

    def trace_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-layer output shapes (C, H, W) for one input image, without running any math."""
        cfg = self.config
        shape = (cfg.input_channels, cfg.input_size, cfg.input_size)
        rows = []
        for name, layer in self.layer_sequence():
            shape = layer.output_shape(shape)
            rows.append((name, shape))
        rows.append(("pooling2", (shape[0], 1, 1)))
        rows.append(("dense", (cfg.num_labels, 1, 1)))
        return rows

    # -- computation

    def _check_inputs(self, images, meta):
        x = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected images [N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}], got {x.shape}"
            )
        if cfg.use_meta and meta is None:
            raise UsageError("this model fuses non-image features; pass meta")
        if not cfg.use_meta and meta is not None:
            raise UsageError("this model has no meta input; meta must be None")
        m = meta_array(meta)
        if m is not None and m.shape[0] != x.shape[0]:
            raise ShapeError(f"meta batch {m.shape[0]} does not match image batch {x.shape[0]}")
        return x, m

    def features(self, images, training: bool = False) -> Tensor:
        """Activation of the final convolutional stage, ``[N, 32*width, g, g]``."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        for _, layer in self.layer_sequence():
            x = layer(x, training)
        return x

    def head_logits(self, feature_map: Tensor, meta: np.ndarray | None = None) -> Tensor:
        pooled = F.global_avgpool(feature_map)
        if self.config.use_meta:
            pooled = F.concat(pooled, Tensor(meta))
        return self.head(pooled)

    def logits(self, images, meta=None, training: bool = False) -> Tensor:
        x, m = self._check_inputs(images, meta)
        return self.head_logits(self.features(x, training), m)

    def pooled_features(self, images, training: bool = False) -> Tensor:
        return F.global_avgpool(self.features(images, training))


class MetaMLP(Network):
    """3 -> 32 (ReLU) -> 15 (sigmoid) classifier on the non-image features alone."""

    kind = "meta_mlp"

    def __init__(self, seed: int = 0, hidden: int = 32, num_labels: int = NUM_LABELS):
        super().__init__()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.hidden = Dense("hidden.0.dense", META_DIM, hidden, rng)
        self.out = Dense("head.0.dense", hidden, num_labels, rng, he=False)
        self._register(self.hidden.parameters() + self.out.parameters())
        self.config = {"hidden": hidden, "num_labels": num_labels}

    def head_parameter_names(self) -> list[str]:
        return [self.out.weight.name, self.out.bias.name]

    def logits(self, images, meta=None, training: bool = False) -> Tensor:
        if meta is None:
            raise UsageError("MetaMLP needs meta features")
        return self.out(F.relu(self.hidden(Tensor(meta_array(meta)))))


PROBE_TARGETS = ("age", "gender", "view")


class Probe(Network):
    """Linear read-out of a frozen ResNet's pooled features.

    ``age`` regresses the scaled age with a linear output and absolute-error
    loss; ``gender`` and ``view`` are single-logit sigmoid classifiers.
    """

    kind = "probe"

    def __init__(self, base: ResNet, target: str, seed: int = 0):
        super().__init__()
        if target not in PROBE_TARGETS:
            raise UsageError(f"probe target must be one of {PROBE_TARGETS}, got {target!r}")
        if not isinstance(base, ResNet):
            raise UsageError("probes read pooled features of a ResNet")
        self.base = base
        self.target = target
        self.seed = seed
        self.output_activation = "linear" if target == "age" else "sigmoid"
        self.loss = "l1" if target == "age" else "bce"
        for name in base.named_parameters():
            base.set_trainable(name, False)
        for unit in base.conv_units():
            unit.frozen = True
        self.head = Dense("probe.0.dense", base.config.feature_dim, 1, np.random.default_rng(seed), he=False)
        self._register(self.head.parameters())
        self.config = {"target": target, "base": base.config.to_dict()}

    def head_parameter_names(self) -> list[str]:
        return [self.head.weight.name, self.head.bias.name]

    def base_features(self, images, batch_size: int = 32) -> np.ndarray:
        n = len(images)
        with no_grad():
            return np.concatenate(
                [self.base.pooled_features(images[i: i + batch_size], training=False).data for i in range(0, n, batch_size)]
            )

    def logits(self, images, meta=None, training: bool = False) -> Tensor:
        # the base is a fixed feature extractor; no graph is recorded through it
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        return self.head(Tensor(self.base_features(x)))


def build_model(config: ModelConfig, seed: int = 0) -> ResNet:
    return ResNet(config, seed)


def build_meta_mlp(seed: int = 0) -> MetaMLP:
    return MetaMLP(seed)


def build_probe(base: ResNet, target: str, seed: int = 0) -> Probe:
    return Probe(base, target, seed)


def forward(model: Network, images, meta=None, training: bool = False) -> Tensor:
    return model.forward(images, meta, training)
