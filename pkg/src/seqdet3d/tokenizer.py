"""Box <-> token codec with a separate vocabulary segment per box attribute.

Token IDs are laid out as::

    0 PAD | 1 START | 2 END | categories [3, 3+C) | x | y | z | l | w | h | yaw | vx | vy

Each object becomes 10 tokens; a scene is ``START, obj_1..., obj_N, END``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, range_to_ego, yaw_normalize

PAD, START, END = 0, 1, 2
NUM_SPECIALS = 3
TOKENS_PER_OBJECT = 10

NUMERIC_ATTRS = ("x", "y", "z", "l", "w", "h", "yaw", "vx", "vy")

# attribute order within one object, keyed by where the class token sits
TOKEN_ORDERS = {
    "first": ("category",) + NUMERIC_ATTRS,
    "middle": ("x", "y", "z", "category", "l", "w", "h", "yaw", "vx", "vy"),
    "last": NUMERIC_ATTRS + ("category",),
}


class CodecError(ValueError):
    """Raised for values or tokens the codec cannot represent."""


class MalformedSequenceError(CodecError):
    pass


class MissingStartError(MalformedSequenceError):
    pass


class MissingEndError(MalformedSequenceError):
    pass


class BodyLengthError(MalformedSequenceError):
    pass


class WrongSegmentError(MalformedSequenceError):
    def __init__(self, position: int, token: int, expected: str, found: str):
        self.position = position
        self.token = token
        super().__init__(
            f"token {token} at interior position {position} is a {found} token, expected {expected}"
        )


@dataclass(frozen=True)
class AttrSpec:
    name: str
    min: float
    width: float
    bins: int

    @property
    def max(self) -> float:
        return self.min + self.width * self.bins


def default_attrs() -> tuple[AttrSpec, ...]:
    return (
        AttrSpec("x", -54.0, 0.05, 2160),
        AttrSpec("y", -54.0, 0.05, 2160),
        AttrSpec("z", -5.0, 0.05, 160),
        AttrSpec("l", 0.0, 0.05, 600),
        AttrSpec("w", 0.0, 0.05, 200),
        AttrSpec("h", 0.0, 0.05, 200),
        AttrSpec("yaw", -math.pi, 2.0 * math.pi / 125, 125),
        AttrSpec("vx", -30.0, 0.1, 600),
        AttrSpec("vy", -30.0, 0.1, 600),
    )


@dataclass(frozen=True)
class VocabLayout:
    num_categories: int = 10
    attrs: tuple[AttrSpec, ...] = field(default_factory=default_attrs)
    token_order: str = "first"

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValueError("need at least one category")
        names = tuple(a.name for a in self.attrs)
        if names != NUMERIC_ATTRS:
            raise ValueError(f"attributes must be {NUMERIC_ATTRS}, got {names}")
        for a in self.attrs:
            if a.bins < 1 or not a.width > 0:
                raise ValueError(f"bad bin spec for {a.name}: {a}")
        if self.token_order not in TOKEN_ORDERS:
            raise ValueError(f"unknown token order {self.token_order!r}")

    @cached_property
    def _attr(self) -> dict[str, AttrSpec]:
        return {a.name: a for a in self.attrs}

    @cached_property
    def segments(self) -> dict[str, tuple[int, int]]:
        """Half-open ID range per token kind."""
        seg = {"pad": (PAD, PAD + 1), "start": (START, START + 1), "end": (END, END + 1)}
        lo = NUM_SPECIALS
        seg["category"] = (lo, lo + self.num_categories)
        lo += self.num_categories
        for a in self.attrs:
            seg[a.name] = (lo, lo + a.bins)
            lo += a.bins
        return seg

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + self.num_categories + sum(a.bins for a in self.attrs)

    @property
    def object_order(self) -> tuple[str, ...]:
        return TOKEN_ORDERS[self.token_order]

    def attr(self, name: str) -> AttrSpec:
        return self._attr[name]

    @cached_property
    def _kind_of(self) -> np.ndarray:
        kinds = np.empty(self.vocab_size, dtype=object)
        for name, (lo, hi) in self.segments.items():
            kinds[lo:hi] = name
        return kinds

    def kind_of(self, token: int) -> str:
        if not 0 <= token < self.vocab_size:
            raise CodecError(f"token {token} outside vocabulary [0, {self.vocab_size})")
        return self._kind_of[token]

    @cached_property
    def _masks(self) -> np.ndarray:
        # (10, V) legal-token masks, one per offset within an object
        m = np.zeros((TOKENS_PER_OBJECT, self.vocab_size), dtype=bool)
        for k in range(TOKENS_PER_OBJECT):
            for kind in expected_kind(k, self):
                lo, hi = self.segments[kind]
                m[k, lo:hi] = True
        m.setflags(write=False)
        return m

    def allowed_mask(self, position: int) -> np.ndarray:
        """Boolean (V,) mask of tokens legal at an interior offset."""
        return self._masks[position % TOKENS_PER_OBJECT]

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_categories": self.num_categories,
                "token_order": self.token_order,
                "attrs": [[a.name, a.min, a.width, a.bins] for a in self.attrs],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "VocabLayout":
        d = json.loads(text)
        attrs = tuple(AttrSpec(n, float(lo), float(w), int(b)) for n, lo, w, b in d["attrs"])
        return cls(num_categories=int(d["num_categories"]), attrs=attrs, token_order=d["token_order"])


def quantize(value: float, attr: str, layout: VocabLayout) -> int:
    spec = layout.attr(attr)
    if not math.isfinite(value):
        raise CodecError(f"cannot quantize non-finite {attr}={value}")
    b = math.floor((value - spec.min) / spec.width)
    b = min(max(b, 0), spec.bins - 1)
    return layout.segments[attr][0] + b


def dequantize(token: int, layout: VocabLayout) -> float:
    kind = layout.kind_of(token)
    if kind not in NUMERIC_ATTRS:
        raise CodecError(f"token {token} is a {kind} token, not a numeric attribute")
    spec = layout.attr(kind)
    return spec.min + (token - layout.segments[kind][0] + 0.5) * spec.width


def encode_box(box: Box3D, layout: VocabLayout) -> list[int]:
    if not 0 <= box.category < layout.num_categories:
        raise CodecError(f"category {box.category} outside [0, {layout.num_categories})")
    out = []
    for kind in layout.object_order:
        if kind == "category":
            out.append(layout.segments["category"][0] + int(box.category))
        else:
            out.append(quantize(getattr(box, kind), kind, layout))
    return out


def decode_box(tokens: Sequence[int], layout: VocabLayout, offset: int = 0) -> Box3D:
    """Inverse of :func:`encode_box`. ``offset`` only labels error positions."""
    if len(tokens) != TOKENS_PER_OBJECT:
        raise BodyLengthError(f"an object needs {TOKENS_PER_OBJECT} tokens, got {len(tokens)}")
    vals = {}
    for k, (kind, tok) in enumerate(zip(layout.object_order, tokens)):
        tok = int(tok)
        found = layout.kind_of(tok) if 0 <= tok < layout.vocab_size else "out-of-vocabulary"
        if found != kind:
            raise WrongSegmentError(offset + k, tok, kind, found)
        if kind == "category":
            vals["category"] = tok - layout.segments["category"][0]
        else:
            vals[kind] = dequantize(tok, layout)
    vals["yaw"] = yaw_normalize(vals["yaw"])
    return Box3D(**vals)


@dataclass(frozen=True)
class OrderingStrategy:
    kind: str = "near_to_far"
    seed: int = 0

    KINDS = ("near_to_far", "random", "point_count")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown ordering {self.kind!r}; choose from {self.KINDS}")

    @classmethod
    def near_to_far(cls) -> "OrderingStrategy":
        return cls("near_to_far")

    @classmethod
    def random(cls, seed: int) -> "OrderingStrategy":
        return cls("random", seed)

    @classmethod
    def point_count(cls) -> "OrderingStrategy":
        return cls("point_count")


def near_to_far_key(box: Box3D):
    return (range_to_ego(box), box.x, box.y, box.category)


def order_boxes(
    boxes: Sequence[Box3D],
    strategy: OrderingStrategy = OrderingStrategy(),
    point_counts: Sequence[int] | None = None,
) -> list[Box3D]:
    boxes = list(boxes)
    if strategy.kind == "near_to_far":
        return sorted(boxes, key=near_to_far_key)
    if strategy.kind == "random":
        perm = np.random.default_rng(strategy.seed).permutation(len(boxes))
        return [boxes[i] for i in perm]
    if point_counts is None:
        raise ValueError("point_count ordering needs per-box point counts")
    if len(point_counts) != len(boxes):
        raise ValueError(f"{len(point_counts)} point counts for {len(boxes)} boxes")
    idx = sorted(range(len(boxes)), key=lambda i: -int(point_counts[i]))
    return [boxes[i] for i in idx]


def encode_boxes(boxes: Iterable[Box3D], layout: VocabLayout) -> list[int]:
    """Concatenate object tokens in the given order, without START/END."""
    out: list[int] = []
    for b in boxes:
        out.extend(encode_box(b, layout))
    return out


def encode_scene(
    boxes: Sequence[Box3D],
    strategy: OrderingStrategy,
    layout: VocabLayout,
    point_counts: Sequence[int] | None = None,
) -> list[int]:
    ordered = order_boxes(boxes, strategy, point_counts)
    return [START] + encode_boxes(ordered, layout) + [END]


def decode_body(body: Sequence[int], layout: VocabLayout) -> list[Box3D]:
    if len(body) % TOKENS_PER_OBJECT:
        raise BodyLengthError(
            f"sequence body has {len(body)} tokens, not a multiple of {TOKENS_PER_OBJECT}"
        )
    return [
        decode_box(body[i : i + TOKENS_PER_OBJECT], layout, offset=i)
        for i in range(0, len(body), TOKENS_PER_OBJECT)
    ]


def decode_scene(seq: Sequence[int], layout: VocabLayout) -> list[Box3D]:
    seq = [int(t) for t in seq]
    if not seq or seq[0] != START:
        raise MissingStartError(f"sequence must begin with START ({START}), got {seq[:1]}")
    if len(seq) < 2 or seq[-1] != END:
        raise MissingEndError(f"sequence must end with END ({END}), got {seq[-1:]}")
    return decode_body(seq[1:-1], layout)


def expected_kind(position: int, layout: VocabLayout) -> frozenset[str]:
    """Token kinds legal at an interior offset (0 = first token after START)."""
    if position < 0:
        raise ValueError(f"position must be non-negative, got {position}")
    k = position % TOKENS_PER_OBJECT
    kind = layout.object_order[k]
    return frozenset({kind, "end"}) if k == 0 else frozenset({kind})
