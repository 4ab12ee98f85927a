"""CNN layer graphs, weight/activation footprints and per-image weight traffic.

Networks are described in a small line-oriented text format::

    network toy
    layer 0 kind=standard-conv kh=3 kw=3 ci=3 co=8 stride=1 in=4x4 out=4x4 pi=1 po=1
    layer 1 kind=pointwise-conv kh=1 kw=1 ci=8 co=16 stride=2 in=4x4 out=2x2 pi=1 po=1
    edge 0 1

Every layer except the first implicitly consumes the previous layer's output
unless it names its producers with ``src=<id>[,<id>...]``.  ``edge <a> <b>``
lines add skip (residual) edges.  ``out=`` may be omitted, in which case the
same-padding output size is derived from ``in`` and ``stride``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

M20K_BITS = 20480
WEIGHT_BITS = 8


class NetworkError(ValueError):
    """Raised for malformed descriptors or inconsistent layer graphs."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class LayerKind(str, Enum):
    STANDARD = "standard-conv"
    DEPTHWISE = "depthwise-conv"
    POINTWISE = "pointwise-conv"
    FC = "fc-as-1x1"


def same_out(size: int, stride: int) -> int:
    return -(-size // stride)


def valid_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    k_h: int
    k_w: int
    c_i: int
    c_o: int
    stride: int
    input_width: int
    input_height: int
    output_width: int
    output_height: int
    p_i: int = 1
    p_o: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        for name in ("k_h", "k_w", "c_i", "c_o", "stride", "input_width",
                     "input_height", "output_width", "output_height", "p_i", "p_o"):
            if getattr(self, name) < 1:
                raise NetworkError(f"layer {self.id}: {name} must be >= 1")
        if self.p_i > self.c_i or self.p_o > self.c_o:
            raise NetworkError(f"layer {self.id}: parallelism exceeds channel count")
        if self.kind is LayerKind.DEPTHWISE and self.c_i != self.c_o:
            raise NetworkError(f"layer {self.id}: depthwise layer needs ci == co")
        for axis, n_in, n_out, k in (("width", self.input_width, self.output_width, self.k_w),
                                     ("height", self.input_height, self.output_height, self.k_h)):
            allowed = {same_out(n_in, self.stride)}
            if n_in >= k:
                allowed.add(valid_out(n_in, k, self.stride))
            if n_out not in allowed:
                raise NetworkError(
                    f"layer {self.id}: output {axis} {n_out} inconsistent with input "
                    f"{n_in}, kernel {k}, stride {self.stride} (expected one of {sorted(allowed)})")

    @property
    def parallelism(self) -> int:
        return self.p_i * self.p_o

    @property
    def weight_count(self) -> int:
        """Number of 8-bit weights in the kernel tensor."""
        if self.kind is LayerKind.DEPTHWISE:
            return self.k_h * self.k_w * self.c_o
        return self.k_h * self.k_w * self.c_i * self.c_o

    @property
    def duplication(self) -> int:
        return -(-self.output_width // 18)

    @property
    def cycles_per_row(self) -> int:
        # each tensor chain consumes one 80-bit word (10 weights) per cycle
        return -(-self.weight_count // (10 * self.parallelism))

    @property
    def words_per_row(self) -> int:
        return self.cycles_per_row * self.parallelism

    def with_parallelism(self, p_i: int, p_o: int) -> "LayerSpec":
        return replace(self, p_i=p_i, p_o=p_o)


@dataclass(frozen=True)
class NetworkModel:
    name: str
    layers: tuple[LayerSpec, ...]
    # successor adjacency: edges[i] lists consumers of layer i
    edges: tuple[tuple[int, ...], ...]
    skip_edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "skip_edges", frozenset(self.skip_edges))
        _validate_graph(self.layers, self.edges)

    @property
    def weight_bits_total(self) -> int:
        return sum(weight_memory_bits(l) for l in self.layers)

    @property
    def activation_bits_total(self) -> int:
        return sum(activation_memory_bits(l) for l in self.layers)

    def __len__(self):
        return len(self.layers)

    def predecessors(self, idx: int) -> list[int]:
        return [src for src, succ in enumerate(self.edges) if idx in succ]

    def with_parallelism(self, par: Iterable[tuple[int, int]]) -> "NetworkModel":
        layers = tuple(l.with_parallelism(pi, po) for l, (pi, po) in zip(self.layers, par))
        return replace(self, layers=layers)


def _validate_graph(layers, edges):
    n = len(layers)
    if n == 0:
        raise NetworkError("network has no layers")
    if len(edges) != n:
        raise NetworkError("edge table size does not match layer count")
    for i, l in enumerate(layers):
        if l.id != i:
            raise NetworkError(f"layer ids must be 0..L-1 in order, got {l.id} at position {i}")
    indeg = [0] * n
    for src, succ in enumerate(edges):
        for dst in succ:
            if not 0 <= dst < n:
                raise NetworkError(f"edge {src}->{dst} references unknown layer")
            if dst == src:
                raise NetworkError(f"self edge on layer {src}")
            indeg[dst] += 1
    if indeg[0] != 0:
        raise NetworkError("layer 0 must be the unique source")
    orphans = [i for i in range(1, n) if indeg[i] == 0]
    if orphans:
        raise NetworkError(f"layers without producers: {orphans}")
    # Kahn's algorithm
    deg = list(indeg)
    ready = [0]
    seen = 0
    while ready:
        v = ready.pop()
        seen += 1
        for w in edges[v]:
            deg[w] -= 1
            if deg[w] == 0:
                ready.append(w)
    if seen != n:
        raise NetworkError("edge set contains a cycle")


def weight_memory_bits(layer: LayerSpec) -> int:
    return layer.weight_count * WEIGHT_BITS


def weight_m20ks(layer: LayerSpec) -> int:
    """On-chip M20K blocks for the layer's weights, width duplication included."""
    return -(-weight_memory_bits(layer) // M20K_BITS) * layer.duplication


def activation_memory_bits(layer: LayerSpec, window_lines: int | None = None) -> int:
    """Sliding-window input buffer: ``window_lines`` full-width input lines."""
    if window_lines is None:
        window_lines = layer.k_h + 1
    if window_lines < layer.k_h:
        raise NetworkError(
            f"layer {layer.id}: window of {window_lines} lines is smaller than kernel height {layer.k_h}")
    return layer.input_width * layer.c_i * window_lines * WEIGHT_BITS


def activation_m20ks(layer: LayerSpec, window_lines: int | None = None) -> int:
    """M20K blocks for the line buffer when each input column gets its own blocks."""
    if window_lines is None:
        window_lines = layer.k_h + 1
    per_column = layer.c_i * window_lines * WEIGHT_BITS
    return layer.input_width * -(-per_column // M20K_BITS)


def skip_buffer_m20ks(net: "NetworkModel", src: int, dst: int) -> int:
    """Blocks holding ``src`` output lines until ``dst`` (further down the pipeline) reads them."""
    lag = sum(net.layers[i].k_h for i in range(src + 1, dst + 1))
    l = net.layers[src]
    per_column = l.c_o * (lag + 1) * WEIGHT_BITS
    return l.output_width * -(-per_column // M20K_BITS)


@dataclass(frozen=True)
class TrafficSummary:
    per_layer_bytes: tuple[int, ...]
    total_bytes: int


def layer_traffic_bytes(layer: LayerSpec) -> int:
    # kernels are reloaded once per output line
    return layer.weight_count * layer.output_height


def weight_traffic_per_image(net: NetworkModel) -> TrafficSummary:
    per = tuple(layer_traffic_bytes(l) for l in net.layers)
    return TrafficSummary(per, sum(per))


# -- descriptor format -------------------------------------------------------

_DIMS = re.compile(r"^(\d+)x(\d+)$")
_INT_KEYS = {"kh": "k_h", "kw": "k_w", "ci": "c_i", "co": "c_o", "stride": "stride",
             "pi": "p_i", "po": "p_o"}


def _int(value: str, key: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise NetworkError(f"{key}={value!r} is not an integer", lineno) from None


def parse_network(text: str, name: str = "net") -> NetworkModel:
    layers: list[LayerSpec] = []
    srcs: dict[int, list[int]] = {}
    skips: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "network":
            if len(tok) != 2:
                raise NetworkError("expected 'network <name>'", lineno)
            name = tok[1]
        elif tok[0] == "edge":
            if len(tok) != 3:
                raise NetworkError("expected 'edge <src> <dst>'", lineno)
            skips.append((_int(tok[1], "src", lineno), _int(tok[2], "dst", lineno), lineno))
        elif tok[0] == "layer":
            if len(tok) < 2:
                raise NetworkError("expected 'layer <id> key=value ...'", lineno)
            lid = _int(tok[1], "id", lineno)
            fields: dict = {"id": lid, "p_i": 1, "p_o": 1}
            src = None
            for kv in tok[2:]:
                if "=" not in kv:
                    raise NetworkError(f"expected key=value, got {kv!r}", lineno)
                key, value = kv.split("=", 1)
                if key == "kind":
                    try:
                        fields["kind"] = LayerKind(value)
                    except ValueError:
                        raise NetworkError(f"unknown layer kind {value!r}", lineno) from None
                elif key in _INT_KEYS:
                    fields[_INT_KEYS[key]] = _int(value, key, lineno)
                elif key in ("in", "out"):
                    m = _DIMS.match(value)
                    if not m:
                        raise NetworkError(f"{key}= expects <W>x<H>, got {value!r}", lineno)
                    w, h = int(m.group(1)), int(m.group(2))
                    prefix = "input" if key == "in" else "output"
                    fields[f"{prefix}_width"], fields[f"{prefix}_height"] = w, h
                elif key == "src":
                    src = [_int(s, "src", lineno) for s in value.split(",")]
                else:
                    raise NetworkError(f"unknown key {key!r}", lineno)
            missing = [k for k in ("kind", "k_h", "k_w", "c_i", "c_o", "input_width")
                       if k not in fields]
            if missing:
                raise NetworkError(f"missing fields {missing}", lineno)
            fields.setdefault("stride", 1)
            if "output_width" not in fields:
                fields["output_width"] = same_out(fields["input_width"], fields["stride"])
                fields["output_height"] = same_out(fields["input_height"], fields["stride"])
            if lid != len(layers):
                raise NetworkError(f"layer id {lid} out of order (expected {len(layers)})", lineno)
            try:
                layers.append(LayerSpec(**fields))
            except NetworkError as exc:
                raise NetworkError(str(exc), lineno) from None
            if src is not None:
                srcs[lid] = src
        else:
            raise NetworkError(f"unknown directive {tok[0]!r}", lineno)

    n = len(layers)
    succ: list[set[int]] = [set() for _ in range(n)]
    for lid in range(1, n):
        for s in srcs.get(lid, [lid - 1]):
            if not 0 <= s < n:
                raise NetworkError(f"layer {lid}: unknown src {s}")
            succ[s].add(lid)
    skip_set = set()
    for a, b, lineno in skips:
        if not (0 <= a < n and 0 <= b < n):
            raise NetworkError(f"edge {a}->{b} references unknown layer", lineno)
        succ[a].add(b)
        skip_set.add((a, b))
    return NetworkModel(name, tuple(layers), tuple(tuple(sorted(s)) for s in succ),
                        frozenset(skip_set))


def serialize_network(net: NetworkModel) -> str:
    out = [f"network {net.name}"]
    for l in net.layers:
        line = (f"layer {l.id} kind={l.kind.value} kh={l.k_h} kw={l.k_w} ci={l.c_i} co={l.c_o} "
                f"stride={l.stride} in={l.input_width}x{l.input_height} "
                f"out={l.output_width}x{l.output_height} pi={l.p_i} po={l.p_o}")
        if l.id > 0:
            prim = sorted(p for p in net.predecessors(l.id) if (p, l.id) not in net.skip_edges)
            if prim != [l.id - 1]:
                line += " src=" + ",".join(map(str, prim))
        out.append(line)
    for a, b in sorted(net.skip_edges):
        out.append(f"edge {a} {b}")
    return "\n".join(out) + "\n"


def builtin_network(name: str) -> NetworkModel:
    from hbmflow import zoo
    try:
        text = zoo.DESCRIPTORS[name]
    except KeyError:
        raise NetworkError(f"unknown builtin network {name!r}; "
                           f"choose from {sorted(zoo.DESCRIPTORS)}") from None
    return parse_network(text)
