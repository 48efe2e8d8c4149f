"""Declarative construction of the densely connected encoder-decoder.

A network has ``stages`` resolution levels. Level ``s`` (1-indexed) runs two
3x3x3 convs producing ``a_s`` then ``b_s`` with ``base * 2**(s-1)`` channels.
Levels 1..S-1 end in a 2x max pool; level S is the bottleneck. The decoder
mirrors levels S-1..1, each concatenating the upsampled features with ``b_s``.

Distributed dense connections only change what is concatenated at the inputs
of encoder convs; :func:`plan_wiring` describes that as data and
:class:`Network` executes it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

PATTERNS = ("none", "cross_skip", "skip_1", "skip_2")
BRIDGE_METHODS = ("avg_pool", "strided_conv", "dilated_conv")

LEAKY_ALPHA = 0.2


@dataclass(frozen=True)
class TopologySpec:
    pattern: str = "cross_skip"
    stages: int = 4
    base_channels: int = 32
    in_channels: int = 4
    out_channels: int = 3
    bridge_method: str = "avg_pool"
    # conv -> LeakyReLU -> BN when True; conv -> BN -> LeakyReLU otherwise
    act_before_norm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.bridge_method not in BRIDGE_METHODS:
            raise ValueError(
                f"unknown bridge method {self.bridge_method!r}; expected one of {BRIDGE_METHODS}"
            )
        if self.stages < 2:
            raise ValueError("stages must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SourceRef:
    """One concatenation input: feature ``slot`` of ``stage`` moved down ``downsamples`` levels.

    ``slot`` is "a" or "b" for conv outputs, "in" for the network input
    (stage 0). ``via`` is "pool" for the regular max-pool path, "bridge" for a
    DDC edge and "direct" for same-resolution use.
    """

    stage: int
    slot: str
    downsamples: int
    via: str

    @property
    def level(self) -> int:
        return max(self.stage, 1) + self.downsamples


@dataclass(frozen=True)
class Junction:
    stage: int
    conv: str  # "a" or "b"
    sources: tuple[SourceRef, ...]


@dataclass(frozen=True)
class WiringPlan:
    pattern: str
    stages: int
    junctions: tuple[Junction, ...] = field(default=())

    def junction(self, stage: int, conv: str) -> Junction:
        for j in self.junctions:
            if j.stage == stage and j.conv == conv:
                return j
        raise KeyError((stage, conv))


def plan_wiring(spec: TopologySpec) -> WiringPlan:
    S, p = spec.stages, spec.pattern
    if p not in PATTERNS:
        raise ValueError(f"unknown pattern {p!r}")
    js = [
        Junction(1, "a", (SourceRef(0, "in", 0, "direct"),)),
        Junction(1, "b", (SourceRef(1, "a", 0, "direct"),)),
    ]
    for s in range(2, S + 1):
        pooled = SourceRef(s - 1, "b", 1, "pool")
        if p == "cross_skip":
            srcs = (pooled,) + tuple(SourceRef(t, "a", s - t, "bridge") for t in range(s - 1, 0, -1))
        elif p == "skip_1":
            srcs = (pooled, SourceRef(s - 1, "a", 1, "bridge"))
        else:
            srcs = (pooled,)
        js.append(Junction(s, "a", srcs))
        b_srcs = (SourceRef(s, "a", 0, "direct"),)
        if p == "skip_2":
            b_srcs += (SourceRef(s - 1, "b", 1, "bridge"),)
        js.append(Junction(s, "b", b_srcs))
    return WiringPlan(p, S, tuple(js))


def check_resolution(plan: WiringPlan) -> None:
    """Structural check: every source is earlier and arrives at the junction's level."""
    order = {(0, "in"): -1}
    for i, j in enumerate(plan.junctions):
        for src in j.sources:
            if (src.stage, src.slot) not in order:
                raise ValueError(f"source {src} used before it is produced")
            if src.level != j.stage:
                raise ValueError(f"source {src} lands on level {src.level}, junction is at {j.stage}")
        order[(j.stage, j.conv)] = i


# -- layer table ----------------------------------------------------------------


@dataclass(frozen=True)
class ConvLayer:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    norm: bool = False  # followed by activation + BN

    @property
    def num_params(self) -> int:
        n = self.cout * self.cin * self.kernel**3 + self.cout
        return n + 2 * self.cout if self.norm else n


def _bridge_layer(name: str, channels: int, method: str) -> ConvLayer | None:
    if method == "strided_conv":
        return ConvLayer(name, channels, channels, 2, stride=2)
    if method == "dilated_conv":
        return ConvLayer(name, channels, channels, 3, stride=2, padding=2, dilation=2)
    return None


def _source_channels(spec: TopologySpec, src: SourceRef) -> int:
    return spec.in_channels if src.slot == "in" else spec.channels(src.stage)


def bridge_hops(plan: WiringPlan) -> list[tuple[int, str, int]]:
    """Distinct bridge applications as (source stage, slot, destination level).

    Hops are shared: ``a_1`` bridged to level 3 reuses its level-2 hop.
    """
    hops = []
    for j in plan.junctions:
        for src in j.sources:
            if src.via != "bridge":
                continue
            for lvl in range(src.stage + 1, src.level + 1):
                hop = (src.stage, src.slot, lvl)
                if hop not in hops:
                    hops.append(hop)
    return hops


def layer_table(spec: TopologySpec, plan: WiringPlan | None = None) -> list[ConvLayer]:
    plan = plan or plan_wiring(spec)
    layers = []
    for j in plan.junctions:
        cin = sum(_source_channels(spec, s) for s in j.sources)
        layers.append(ConvLayer(f"enc{j.stage}.{j.conv}", cin, spec.channels(j.stage), 3, padding=1, norm=True))
    for t, slot, lvl in bridge_hops(plan):
        layer = _bridge_layer(f"bridge.{slot}{t}.to{lvl}", spec.channels(t), spec.bridge_method)
        if layer is not None:
            layers.append(layer)
    for s in range(spec.stages - 1, 0, -1):
        c = spec.channels(s)
        layers.append(ConvLayer(f"dec{s}.a", spec.channels(s + 1) + c, c, 3, padding=1, norm=True))
        layers.append(ConvLayer(f"dec{s}.b", c, c, 3, padding=1, norm=True))
    layers.append(ConvLayer("head", spec.base_channels, spec.out_channels, 1))
    return layers


# -- network ------------------------------------------------------------------


class Network:
    """Parameters, BN state and the forward pass for one :class:`TopologySpec`."""

    def __init__(self, spec: TopologySpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.plan = plan_wiring(spec)
        check_resolution(self.plan)
        self.dtype = np.dtype(dtype)
        self.layers = {layer.name: layer for layer in layer_table(spec, self.plan)}
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        for layer in self.layers.values():
            fan_in = layer.cin * layer.kernel**3
            bound = np.sqrt(6.0 / fan_in)
            shape = (layer.cout, layer.cin) + (layer.kernel,) * 3
            w = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
            self.params[layer.name + ".weight"] = Tensor(w, requires_grad=True)
            self.params[layer.name + ".bias"] = Tensor(np.zeros(layer.cout, self.dtype), requires_grad=True)
            if layer.norm:
                self.params[layer.name + ".gamma"] = Tensor(np.ones(layer.cout, self.dtype), requires_grad=True)
                self.params[layer.name + ".beta"] = Tensor(np.zeros(layer.cout, self.dtype), requires_grad=True)
                self.bn[layer.name] = BatchNormState(
                    layer.cout, momentum=spec.bn_momentum, eps=spec.bn_eps, dtype=self.dtype
                )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _conv(self, name: str, x: Tensor, training: bool) -> Tensor:
        layer = self.layers[name]
        y = T.conv3d(
            x,
            self.params[name + ".weight"],
            self.params[name + ".bias"],
            stride=layer.stride,
            padding=layer.padding,
            dilation=layer.dilation,
        )
        if not layer.norm:
            return y
        gamma, beta = self.params[name + ".gamma"], self.params[name + ".beta"]
        if self.spec.act_before_norm:
            return T.batch_norm3d(T.leaky_relu(y, LEAKY_ALPHA), gamma, beta, self.bn[name], training)
        return T.leaky_relu(T.batch_norm3d(y, gamma, beta, self.bn[name], training), LEAKY_ALPHA)

    def _bridge(self, x: Tensor, name: str, training: bool) -> Tensor:
        if self.spec.bridge_method == "avg_pool":
            return T.avg_pool3d(x)
        return self._conv(name, x, training)

    def check_input(self, shape: tuple[int, ...]):
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input [N,{self.spec.in_channels},D,H,W], got {tuple(shape)}")
        div = self.spec.divisor
        if any(s % div for s in shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(shape[2:])} must be divisible by 2^(stages-1) = {div}"
            )

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self.check_input(x.shape)
        training = mode == "train"
        feats: dict[tuple[int, str], Tensor] = {(0, "in"): x}
        moved: dict[tuple[int, str, int], Tensor] = {}

        def fetch(src: SourceRef) -> Tensor:
            base = feats[(src.stage, src.slot)]
            if src.via == "direct":
                return base
            if src.via == "pool":
                return T.max_pool3d(base)
            cur, lvl = base, src.stage
            while lvl < src.level:
                lvl += 1
                key = (src.stage, src.slot, lvl)
                if key not in moved:
                    moved[key] = self._bridge(cur, f"bridge.{src.slot}{src.stage}.to{lvl}", training)
                cur = moved[key]
            return cur

        for j in self.plan.junctions:
            inp = T.concat_channels([fetch(s) for s in j.sources])
            feats[(j.stage, j.conv)] = self._conv(f"enc{j.stage}.{j.conv}", inp, training)

        y = feats[(self.spec.stages, "b")]
        for s in range(self.spec.stages - 1, 0, -1):
            y = T.concat_channels([T.upsample_nearest3d(y), feats[(s, "b")]])
            y = self._conv(f"dec{s}.a", y, training)
            y = self._conv(f"dec{s}.b", y, training)
        return T.sigmoid(self._conv("head", y, training))

    __call__ = forward

    # -- state ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data.copy() for k, v in self.params.items()}
        for k, bn in self.bn.items():
            state[f"bn/{k}.running_mean"] = bn.running_mean.copy()
            state[f"bn/{k}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            arr = state[f"param/{k}"]
            if arr.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {v.shape}")
            v.data = arr.astype(self.dtype, copy=True)
        for k, bn in self.bn.items():
            bn.running_mean = state[f"bn/{k}.running_mean"].astype(self.dtype, copy=True)
            bn.running_var = state[f"bn/{k}.running_var"].astype(self.dtype, copy=True)


def build_network(spec: TopologySpec, seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, seed=seed, dtype=dtype)


def forward(network: Network, batch: Tensor, mode: str = "train") -> Tensor:
    return network.forward(batch, mode)


def bridge(x: Tensor, method: str = "avg_pool", weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Halve spatial extents with one of the three resolution-matching transforms.

    The conv methods need ``weight``/``bias``; ``avg_pool`` has no parameters.
    """
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"bridge needs even spatial extents, got {x.shape[2:]}")
    if method == "avg_pool":
        return T.avg_pool3d(x)
    if method not in BRIDGE_METHODS:
        raise ValueError(f"unknown bridge method {method!r}")
    if weight is None:
        raise ValueError(f"bridge method {method!r} needs a weight")
    if method == "strided_conv":
        return T.conv3d(x, weight, bias, stride=2)
    return T.conv3d(x, weight, bias, stride=2, padding=2, dilation=2)


def count_parameters(network: Network) -> int:
    return int(sum(p.size for p in network.params.values()))


def count_parameters_spec(spec: TopologySpec) -> int:
    """Parameter count from the layer table without allocating weights."""
    return sum(layer.num_params for layer in layer_table(spec))
