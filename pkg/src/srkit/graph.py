"""Declarative model graphs and their reference executor.

A ModelGraph is an ordered list of named nodes wired by name: one input, one
output, skip/concat fan-in allowed. Conv nodes may additionally carry a
training-form decoration (a LoRA branch or a parallel-branch group) that the
executor runs live and the fuse rewrites fold away.

Attention triples (1x1 conv, add, mul) registered as fusion groups execute
through the fused single-pass operator in "fused" mode and through the
literal three-op reference in "unfused" mode; both modes accept a traffic
counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .fusion import (
    BranchGroup,
    LoraFactors,
    TrafficCounter,
    branch_forward,
    fused_attention,
    lora_forward,
    reference_attention,
)
from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    mul,
    pixel_shuffle,
    relu,
)

_OPS = {"input", "conv", "relu", "add", "mul", "concat", "pixel_shuffle"}

MODES = ("unfused", "fused")


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    spec: ConvSpec | None = None
    channels: int | None = None  # input nodes only
    upscale: int | None = None  # pixel_shuffle nodes only
    lora: LoraFactors | None = None
    branches: BranchGroup | None = None


@dataclass
class FusionGroup:
    """Names of the (1x1 conv, residual add, gating mul) attention triple."""

    conv: str
    add: str
    mul: str


@dataclass
class ModelGraph:
    name: str
    nodes: list[Node]
    output: str
    meta: dict = field(default_factory=dict)
    fusion_groups: list[FusionGroup] = field(default_factory=list)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(f"no node named {name!r}")

    def conv_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "conv"]

    def validate(self) -> None:
        validate_graph(self)


def validate_graph(g: ModelGraph) -> None:
    """Check the graph is a single-source, single-sink DAG with consistent widths."""
    seen: set[str] = set()
    sources = [n for n in g.nodes if n.op == "input"]
    if len(sources) != 1 or g.nodes[0].op != "input":
        raise ShapeError("graph must start with exactly one input node")
    for n in g.nodes:
        if n.name in seen:
            raise ShapeError(f"duplicate node name {n.name!r}")
        if n.op not in _OPS:
            raise ShapeError(f"unknown op {n.op!r} in node {n.name!r}")
        for ref in n.inputs:
            if ref not in seen:
                raise ShapeError(
                    f"node {n.name!r} consumes {ref!r} before it is defined"
                )
        seen.add(n.name)
    if g.output not in seen:
        raise ShapeError(f"graph output {g.output!r} is not a node")
    consumers = _consumer_counts(g)
    dangling = [
        n.name for n in g.nodes if n.name != g.output and consumers[n.name] == 0
    ]
    if dangling:
        raise ShapeError(f"dangling nodes (no consumer): {dangling}")
    infer_channels(g)  # raises on width mismatches
    group_names = set()
    for fg in g.fusion_groups:
        conv, addn, muln = g.node(fg.conv), g.node(fg.add), g.node(fg.mul)
        if conv.op != "conv" or addn.op != "add" or muln.op != "mul":
            raise ShapeError(f"fusion group {fg} does not name conv/add/mul nodes")
        if conv.spec is None or conv.spec.kernel != (1, 1) or conv.spec.groups != 1:
            raise ShapeError(f"fusion group conv {fg.conv!r} must be a plain 1x1 conv")
        if set(muln.inputs) != {fg.conv, fg.add}:
            raise ShapeError(f"fusion group mul {fg.mul!r} must consume the conv and add")
        if conv.inputs[0] not in addn.inputs:
            raise ShapeError(
                f"fusion group {fg.mul!r}: the 1x1 conv and the add must share f3"
            )
        if consumers[fg.conv] != 1 or consumers[fg.add] != 1:
            raise ShapeError(
                f"fusion group {fg.mul!r}: conv/add outputs must feed only the mul"
            )
        if g.output in (fg.conv, fg.add):
            raise ShapeError("graph output cannot be inside a fusion group")
        for name in (fg.conv, fg.add, fg.mul):
            if name in group_names:
                raise ShapeError(f"node {name!r} appears in two fusion groups")
            group_names.add(name)


def _consumer_counts(g: ModelGraph) -> dict[str, int]:
    counts = {n.name: 0 for n in g.nodes}
    for n in g.nodes:
        for ref in n.inputs:
            counts[ref] += 1
    return counts


def infer_channels(g: ModelGraph) -> dict[str, int]:
    """Channel width per node; raises ShapeError on inconsistent wiring."""
    widths: dict[str, int] = {}
    for n in g.nodes:
        if n.op == "input":
            if n.channels is None:
                raise ShapeError(f"input node {n.name!r} must declare channels")
            widths[n.name] = n.channels
        elif n.op == "conv":
            cin = widths[n.inputs[0]]
            want_in, want_out = _conv_io(n)
            if want_in != cin:
                raise ShapeError(
                    f"conv {n.name!r} expects {want_in} channels, "
                    f"producer provides {cin}"
                )
            widths[n.name] = want_out
        elif n.op == "relu":
            widths[n.name] = widths[n.inputs[0]]
        elif n.op in ("add", "mul"):
            a, b = (widths[r] for r in n.inputs)
            if a != b:
                raise ShapeError(f"{n.op} {n.name!r} mixes widths {a} and {b}")
            widths[n.name] = a
        elif n.op == "concat":
            widths[n.name] = sum(widths[r] for r in n.inputs)
        elif n.op == "pixel_shuffle":
            c = widths[n.inputs[0]]
            s = n.upscale or 1
            if c % (s * s):
                raise ShapeError(
                    f"pixel_shuffle {n.name!r}: {c} channels not divisible by {s * s}"
                )
            widths[n.name] = c // (s * s)
    return widths


def _conv_io(n: Node) -> tuple[int, int]:
    """(in_channels, out_channels) of a conv node, branch-form included."""
    if n.spec is not None:
        return n.spec.in_channels, n.spec.out_channels
    if n.branches is not None:
        b = n.branches.branches[0]
        return b.in_channels, b.out_channels
    raise ShapeError(f"conv node {n.name!r} has neither spec nor branches")


def run_graph(
    g: ModelGraph,
    x: Tensor,
    mode: str = "unfused",
    counter: TrafficCounter | None = None,
) -> Tensor:
    """Execute the graph on x. mode selects the attention execution plan."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    consumers = _consumer_counts(g)
    consumers[g.output] += 1  # keep the sink alive
    by_mul = {fg.mul: fg for fg in g.fusion_groups}
    skip = {name for fg in g.fusion_groups for name in (fg.conv, fg.add)}
    env: dict[str, Tensor] = {}
    remaining: dict[str, int] = {}

    def consume(name: str) -> Tensor:
        val = env[name]
        remaining[name] -= 1
        if remaining[name] == 0:
            del env[name]
        return val

    for n in g.nodes:
        if n.name in skip:
            continue
        if n.op == "input":
            if x.c != n.channels:
                raise ShapeError(
                    f"graph {g.name!r} expects {n.channels}-channel input, got {x.c}"
                )
            out = x
        elif n.op == "conv":
            src = consume(n.inputs[0])
            if n.branches is not None:
                out = branch_forward(src, n.branches)
            elif n.lora is not None:
                out = lora_forward(src, n.spec, n.lora)
            else:
                out = conv2d(src, n.spec)
        elif n.op == "relu":
            out = relu(consume(n.inputs[0]))
        elif n.op == "add":
            out = add(consume(n.inputs[0]), consume(n.inputs[1]))
        elif n.op == "mul":
            if n.name in by_mul:
                out = _run_attention(g, by_mul[n.name], consume, mode, counter)
            else:
                out = mul(consume(n.inputs[0]), consume(n.inputs[1]))
        elif n.op == "concat":
            out = concat_channels([consume(r) for r in n.inputs])
        elif n.op == "pixel_shuffle":
            out = pixel_shuffle(consume(n.inputs[0]), n.upscale or 1)
        env[n.name] = out
        remaining[n.name] = consumers[n.name]
    return env[g.output]


def _run_attention(g, fg, consume, mode: str, counter) -> Tensor:
    conv_node = g.node(fg.conv)
    add_node = g.node(fg.add)
    f3_name = conv_node.inputs[0]
    f3 = consume(f3_name)  # the 1x1 conv's reference
    operands = [consume(r) for r in add_node.inputs]  # the add's references
    if add_node.inputs[0] == f3_name:
        res = operands[1]
    else:
        res = operands[0]
    fn = fused_attention if mode == "fused" else reference_attention
    return fn(res, f3, conv_node.spec, counter)
