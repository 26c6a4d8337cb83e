"""Score-free detection metrics: center-distance matching, P/R/F1 and TP errors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .geometry import Box3D, center_distance_bev, wrap_angle_diff
from .scenegen import CATEGORY_NAMES

TP_THRESHOLD = 2.0


@dataclass(frozen=True)
class MatchConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be positive and strictly increasing, got {t}")
        object.__setattr__(self, "thresholds", t)


def match(preds: Sequence[Box3D], gts: Sequence[Box3D], category: int | None, threshold: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching in ascending BEV center distance.

    Returns (pred index, gt index) pairs, all same-category and closer than
    ``threshold``. ``category=None`` matches within every category.
    """
    cand = []
    for i, p in enumerate(preds):
        if category is not None and p.category != category:
            continue
        for j, g in enumerate(gts):
            if g.category != p.category:
                continue
            d = center_distance_bev(p, g)
            if d < threshold:
                cand.append((d, i, j))
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class Cell:
    category: int
    threshold: float
    n_pred: int
    n_gt: int
    matches: int

    @property
    def precision(self) -> float:
        return self.matches / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.matches / self.n_gt if self.n_gt else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


@dataclass(frozen=True)
class TPErrors:
    ate: float
    ase: float
    aoe: float
    ave: float
    count: int


def tp_errors(pairs: Sequence[tuple[Box3D, Box3D]]) -> TPErrors | None:
    """Mean translation, scale, orientation and velocity errors; None without pairs."""
    if not pairs:
        return None
    ate, ase, aoe, ave = [], [], [], []
    for p, g in pairs:
        ate.append(center_distance_bev(p, g))
        lo = min(p.l, g.l) * min(p.w, g.w) * min(p.h, g.h)
        hi = max(p.l, g.l) * max(p.w, g.w) * max(p.h, g.h)
        ase.append(1.0 - lo / hi)
        aoe.append(abs(wrap_angle_diff(p.yaw, g.yaw)))
        ave.append(math.hypot(p.vx - g.vx, p.vy - g.vy))
    n = len(pairs)
    return TPErrors(math.fsum(ate) / n, math.fsum(ase) / n, math.fsum(aoe) / n, math.fsum(ave) / n, n)


@dataclass
class EvalReport:
    cells: list[Cell]
    thresholds: tuple[float, ...]
    tp: TPErrors | None
    scenes: int
    categories: list[int] = field(default_factory=list)

    def _macro(self, attr: str, threshold: float) -> float:
        vals = [getattr(c, attr) for c in self.cells if c.threshold == threshold]
        return math.fsum(vals) / len(vals) if vals else 0.0

    def mean(self, attr: str) -> float:
        """Macro average over categories, then over thresholds."""
        return math.fsum(self._macro(attr, t) for t in self.thresholds) / len(self.thresholds)

    @property
    def precision(self) -> float:
        return self.mean("precision")

    @property
    def recall(self) -> float:
        return self.mean("recall")

    @property
    def f1(self) -> float:
        return self.mean("f1")

    def f1_at(self, threshold: float) -> float:
        return self._macro("f1", threshold)

    def recall_at(self, threshold: float) -> float:
        return self._macro("recall", threshold)

    def to_lines(self) -> list[str]:
        out = []
        for c in self.cells:
            name = _name(c.category)
            for key in ("precision", "recall", "f1"):
                out.append(f"metric {name} {c.threshold:g} {key} {getattr(c, key):.6f}")
            out.append(f"metric {name} {c.threshold:g} matches {c.matches}")
        for t in self.thresholds:
            for key in ("precision", "recall", "f1"):
                out.append(f"metric mean {t:g} {key} {self._macro(key, t):.6f}")
        for key in ("precision", "recall", "f1"):
            out.append(f"metric mean all {key} {self.mean(key):.6f}")
        for key in ("ate", "ase", "aoe", "ave"):
            val = "absent" if self.tp is None else f"{getattr(self.tp, key):.6f}"
            out.append(f"metric mean {TP_THRESHOLD:g} {key} {val}")
        return out

    def to_text(self) -> str:
        head = f"{'category':<22}{'thr':>6}{'pred':>7}{'gt':>7}{'match':>7}{'P':>9}{'R':>9}{'F1':>9}"
        rows = [f"scenes: {self.scenes}", head, "-" * len(head)]
        for c in self.cells:
            rows.append(
                f"{_name(c.category):<22}{c.threshold:>6g}{c.n_pred:>7}{c.n_gt:>7}{c.matches:>7}"
                f"{c.precision:>9.4f}{c.recall:>9.4f}{c.f1:>9.4f}"
            )
        rows.append("-" * len(head))
        for t in self.thresholds:
            rows.append(
                f"{'mean':<22}{t:>6g}{'':>21}{self._macro('precision', t):>9.4f}"
                f"{self._macro('recall', t):>9.4f}{self._macro('f1', t):>9.4f}"
            )
        rows.append(f"{'mean':<22}{'all':>6}{'':>21}{self.precision:>9.4f}{self.recall:>9.4f}{self.f1:>9.4f}")
        if self.tp is None:
            rows.append("tp errors @2m: absent (no matched pairs)")
        else:
            e = self.tp
            rows.append(f"tp errors @2m ({e.count} pairs): ATE {e.ate:.4f}  ASE {e.ase:.4f}  AOE {e.aoe:.4f}  AVE {e.ave:.4f}")
        return "\n".join(rows) + "\n"


def _name(category: int) -> str:
    return CATEGORY_NAMES[category] if 0 <= category < len(CATEGORY_NAMES) else f"class{category}"


def evaluate(
    preds: Sequence[Sequence[Box3D]], gts: Sequence[Sequence[Box3D]], cfg: MatchConfig = MatchConfig()
) -> EvalReport:
    """Dataset-level metrics; matching happens within each scene, counts are summed."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} scenes")
    cats = sorted({b.category for s in preds for b in s} | {b.category for s in gts for b in s})
    cells = []
    for c in cats:
        n_pred = sum(1 for s in preds for b in s if b.category == c)
        n_gt = sum(1 for s in gts for b in s if b.category == c)
        for t in cfg.thresholds:
            m = sum(len(match(p, g, c, t)) for p, g in zip(preds, gts))
            cells.append(Cell(c, t, n_pred, n_gt, m))
    pairs = []
    for p, g in zip(preds, gts):
        pairs.extend((p[i], g[j]) for i, j in match(p, g, None, TP_THRESHOLD))
    return EvalReport(cells, cfg.thresholds, tp_errors(pairs), len(gts), cats)


def precision_recall_f1(preds: Sequence[Box3D], gts: Sequence[Box3D], cfg: MatchConfig = MatchConfig()) -> EvalReport:
    """Metrics for a single scene."""
    return evaluate([preds], [gts], cfg)
