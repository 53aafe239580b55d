"""Framework-agnostic model description, block parsing and layer deduplication.

A model document is JSON::

    {"name": "cnn5", "iterations": 500, "batch_size": 10,
     "layers": [{"kind": "Conv2d", "kernel_size": 3, "stride": 1,
                 "in_channels": 1, "out_channels": 32, "height": 28, "width": 28},
                {"kind": "BatchNorm"}, {"kind": "MaxPool"}, ...]}

Parametric layers open a block; non-parametric layers attach to the block
opened before them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional


class ModelError(ValueError):
    """Raised for malformed model documents or invariant violations."""


class Kind(str, Enum):
    Conv2d = "Conv2d"
    FullyConnected = "FullyConnected"
    Embedding = "Embedding"
    LstmCell = "LstmCell"
    AttentionEncoder = "AttentionEncoder"
    BatchNorm = "BatchNorm"
    MaxPool = "MaxPool"
    Dropout = "Dropout"
    ReLU = "ReLU"
    Flatten = "Flatten"

    @property
    def parametric(self) -> bool:
        return self in PARAMETRIC


PARAMETRIC = frozenset(
    {Kind.Conv2d, Kind.FullyConnected, Kind.Embedding, Kind.LstmCell, Kind.AttentionEncoder}
)


class Role(str, Enum):
    Input = "Input"
    Hidden = "Hidden"
    Output = "Output"


# structural hyperparameters a layer entry may carry
PARAM_FIELDS = ("kernel_size", "stride", "units", "heads")
LAYER_FIELDS = frozenset(("kind", "in_channels", "out_channels", "height", "width") + PARAM_FIELDS)
DOC_FIELDS = frozenset(("name", "iterations", "batch_size", "layers"))


@dataclass(frozen=True)
class RawLayer:
    kind: Kind
    params: tuple = ()  # sorted (name, value) pairs
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    height: Optional[int] = None
    width: Optional[int] = None

    def param(self, name, default=None):
        return dict(self.params).get(name, default)


@dataclass(frozen=True)
class LayerKey:
    """Dedup identity of a layer population. Channel widths are not part of it."""

    role: Role
    kind: Kind
    kernel_size: Optional[int]
    stride: Optional[int]
    spatial: tuple
    batch_size: int
    attached_signature: tuple = ()

    @property
    def ndim(self) -> int:
        return 2 if self.role is Role.Hidden else 1

    def to_str(self) -> str:
        ks = "-" if self.kernel_size is None else str(self.kernel_size)
        st = "-" if self.stride is None else str(self.stride)
        att = "+".join(k.value for k in self.attached_signature) or "-"
        return "|".join(
            [self.role.value, self.kind.value, f"k{ks}", f"s{st}",
             f"{self.spatial[0]}x{self.spatial[1]}", f"b{self.batch_size}", att]
        )

    @classmethod
    def from_str(cls, text: str) -> "LayerKey":
        try:
            role, kind, ks, st, hw, b, att = text.split("|")
            h, w = hw.split("x")
            return cls(
                role=Role(role),
                kind=Kind(kind),
                kernel_size=None if ks == "k-" else int(ks[1:]),
                stride=None if st == "s-" else int(st[1:]),
                spatial=(int(h), int(w)),
                batch_size=int(b[1:]),
                attached_signature=() if att == "-" else tuple(Kind(a) for a in att.split("+")),
            )
        except (ValueError, KeyError) as exc:
            raise ModelError(f"bad layer key string {text!r}") from exc

    def slug(self) -> str:
        """Filesystem-safe rendering of :meth:`to_str`."""
        return self.to_str().replace("|", "__").replace("+", "-")

    def __str__(self):
        return self.to_str()


@dataclass(frozen=True)
class LayerBlock:
    role: Role
    anchor: RawLayer
    attached: tuple
    in_channels: int
    out_channels: int
    spatial: tuple
    batch_size: int

    @property
    def key(self) -> LayerKey:
        return LayerKey(
            role=self.role,
            kind=self.anchor.kind,
            kernel_size=self.anchor.param("kernel_size"),
            stride=self.anchor.param("stride"),
            spatial=self.spatial,
            batch_size=self.batch_size,
            attached_signature=tuple(a.kind for a in self.attached),
        )

    @property
    def coordinate(self) -> tuple:
        """Channel coordinate this block is looked up at."""
        if self.role is Role.Input:
            return (self.out_channels,)
        if self.role is Role.Output:
            return (self.in_channels,)
        return (self.in_channels, self.out_channels)

    def with_channels(self, in_channels=None, out_channels=None) -> "LayerBlock":
        cin = self.in_channels if in_channels is None else int(in_channels)
        cout = self.out_channels if out_channels is None else int(out_channels)
        anchor = replace(self.anchor, in_channels=cin, out_channels=cout)
        return replace(self, anchor=anchor, in_channels=cin, out_channels=cout)

    def with_role(self, role: Role) -> "LayerBlock":
        return replace(self, role=role)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    blocks: tuple
    iterations: int = 1
    batch_size: int = 1

    def __post_init__(self):
        validate_blocks(self.blocks)
        if self.iterations < 1:
            raise ModelError("iterations must be a positive integer")

    def __len__(self):
        return len(self.blocks)

    def interfaces(self) -> list:
        """Channel widths between consecutive blocks."""
        return [b.out_channels for b in self.blocks[:-1]]

    def with_interfaces(self, widths, name=None) -> "ModelSpec":
        """Copy with the inter-block widths replaced, re-chaining neighbours."""
        widths = [int(w) for w in widths]
        if len(widths) != len(self.blocks) - 1:
            raise ModelError("need one width per block interface")
        blocks = []
        for i, b in enumerate(self.blocks):
            cin = widths[i - 1] if i > 0 else b.in_channels
            cout = widths[i] if i < len(widths) else b.out_channels
            blocks.append(b.with_channels(cin, cout))
        return replace(self, blocks=tuple(blocks), name=name or self.name)


def assign_roles(n: int) -> list:
    if n == 1:
        return [Role.Output]
    return [Role.Input] + [Role.Hidden] * (n - 2) + [Role.Output]


def validate_blocks(blocks) -> None:
    if not blocks:
        raise ModelError("model has no parametric layers")
    roles = [b.role for b in blocks]
    if roles.count(Role.Output) != 1 or (len(blocks) > 1 and roles.count(Role.Input) != 1):
        raise ModelError("model needs exactly one Input and one Output block")
    if roles != assign_roles(len(blocks)):
        raise ModelError(f"block roles out of order: {[r.value for r in roles]}")
    for i, b in enumerate(blocks):
        if b.in_channels < 1 or b.out_channels < 1:
            raise ModelError(f"block {i}: channel widths must be >= 1")
        if any(a.kind.parametric for a in b.attached):
            raise ModelError(f"block {i}: attached layers must be non-parametric")
        if i > 0 and b.in_channels != blocks[i - 1].out_channels:
            raise ModelError(
                f"channel chain mismatch at block {i}: in_channels {b.in_channels} "
                f"!= previous out_channels {blocks[i - 1].out_channels}"
            )
        if b.anchor.kind is Kind.Embedding and b.role is not Role.Input and len(blocks) > 1:
            raise ModelError(f"block {i}: Embedding layers are only allowed as the input layer")


def _pos_int(value, what):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ModelError(f"{what} must be a positive integer, got {value!r}")
    return value


def _parse_layer(i: int, entry) -> RawLayer:
    if not isinstance(entry, dict):
        raise ModelError(f"layer {i}: expected an object")
    if "branches" in entry:
        raise ModelError(f"layer {i}: parallel branches are not supported")
    unknown = set(entry) - LAYER_FIELDS
    if unknown:
        raise ModelError(f"layer {i}: unknown fields {sorted(unknown)}")
    try:
        kind = Kind(entry.get("kind"))
    except ValueError:
        raise ModelError(f"layer {i}: unknown kind {entry.get('kind')!r}") from None
    params = tuple(sorted((k, _pos_int(entry[k], f"layer {i} {k}")) for k in PARAM_FIELDS if k in entry))
    if kind.parametric:
        for k in ("in_channels", "out_channels"):
            if k not in entry:
                raise ModelError(f"layer {i}: {kind.value} must declare {k}")
        cin = _pos_int(entry["in_channels"], f"layer {i} in_channels")
        cout = _pos_int(entry["out_channels"], f"layer {i} out_channels")
    else:
        if "in_channels" in entry or "out_channels" in entry:
            raise ModelError(f"layer {i}: non-parametric {kind.value} must not declare channels")
        cin = cout = None
    h = _pos_int(entry["height"], f"layer {i} height") if "height" in entry else None
    w = _pos_int(entry["width"], f"layer {i} width") if "width" in entry else None
    return RawLayer(kind=kind, params=params, in_channels=cin, out_channels=cout, height=h, width=w)


def build_model(name, layers, iterations=1, batch_size=1) -> ModelSpec:
    """Group raw layers into role-tagged blocks."""
    groups = []
    for i, layer in enumerate(layers):
        if layer.kind.parametric:
            groups.append([layer, []])
        elif not groups:
            raise ModelError(f"layer {i}: non-parametric {layer.kind.value} has no preceding parametric layer")
        else:
            groups[-1][1].append(layer)
    if not groups:
        raise ModelError("model has no parametric layers")
    roles = assign_roles(len(groups))
    blocks = tuple(
        LayerBlock(
            role=role,
            anchor=anchor,
            attached=tuple(att),
            in_channels=anchor.in_channels,
            out_channels=anchor.out_channels,
            spatial=(anchor.height or 1, anchor.width or 1),
            batch_size=batch_size,
        )
        for role, (anchor, att) in zip(roles, groups)
    )
    return ModelSpec(name=name, blocks=blocks, iterations=iterations, batch_size=batch_size)


def model_from_dict(doc) -> ModelSpec:
    if not isinstance(doc, dict):
        raise ModelError("model document must be an object")
    unknown = set(doc) - DOC_FIELDS
    if unknown:
        raise ModelError(f"unknown document fields {sorted(unknown)}")
    for k in ("name", "layers"):
        if k not in doc:
            raise ModelError(f"missing field {k!r}")
    if not isinstance(doc["name"], str):
        raise ModelError("name must be a string")
    if not isinstance(doc["layers"], list):
        raise ModelError("layers must be a list")
    iterations = _pos_int(doc.get("iterations", 1), "iterations")
    batch = _pos_int(doc.get("batch_size", 1), "batch_size")
    layers = [_parse_layer(i, e) for i, e in enumerate(doc["layers"])]
    return build_model(doc["name"], layers, iterations=iterations, batch_size=batch)


def parse_model(text: str) -> ModelSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    return model_from_dict(doc)


def load_model(path) -> ModelSpec:
    with open(path) as fh:
        return parse_model(fh.read())


def _layer_dict(layer: RawLayer) -> dict:
    d = {"kind": layer.kind.value}
    d.update(dict(layer.params))
    if layer.kind.parametric:
        d["in_channels"] = layer.in_channels
        d["out_channels"] = layer.out_channels
    if layer.height is not None:
        d["height"] = layer.height
    if layer.width is not None:
        d["width"] = layer.width
    return d


def model_to_dict(model: ModelSpec) -> dict:
    layers = []
    for b in model.blocks:
        layers.append(_layer_dict(b.anchor))
        layers.extend(_layer_dict(a) for a in b.attached)
    return {
        "name": model.name,
        "iterations": model.iterations,
        "batch_size": model.batch_size,
        "layers": layers,
    }


def serialize_model(model: ModelSpec) -> str:
    return json.dumps(model_to_dict(model), indent=2)


def dedup_keys(model: ModelSpec) -> list:
    """Group block indices by LayerKey, in first-appearance order."""
    groups: dict = {}
    for i, b in enumerate(model.blocks):
        groups.setdefault(b.key, []).append(i)
    return list(groups.items())


def channel_bounds(key: LayerKey, model: ModelSpec) -> tuple:
    """Per-axis (lo, hi) channel bounds of ``key`` within ``model``."""
    coords = [b.coordinate for b in model.blocks if b.key == key]
    if not coords:
        raise ModelError(f"key {key} does not occur in model {model.name!r}")
    return tuple((1, max(c[a] for c in coords)) for a in range(key.ndim))


def make_block(role, kind, in_channels, out_channels, *, kernel_size=None, stride=None,
               spatial=(1, 1), batch_size=1, attached=()) -> LayerBlock:
    """Convenience constructor used by tests and fixtures."""
    params = tuple(sorted(
        (k, v) for k, v in (("kernel_size", kernel_size), ("stride", stride)) if v is not None
    ))
    h, w = spatial
    anchor = RawLayer(Kind(kind), params, in_channels, out_channels,
                      None if (h, w) == (1, 1) else h, None if (h, w) == (1, 1) else w)
    return LayerBlock(
        role=Role(role),
        anchor=anchor,
        attached=tuple(RawLayer(Kind(a)) for a in attached),
        in_channels=in_channels,
        out_channels=out_channels,
        spatial=tuple(spatial),
        batch_size=batch_size,
    )
