"""Hungarian set matching and the set-prediction losses.

The matching cost for query ``q`` and target ``g`` is
``-w_cls·p_q(class_g) + w_l1·|box_q - box_g|_1 + w_giou·(1 - giou(box_q, box_g))``,
evaluated on detached predictions.  The loss is a weighted cross-entropy over
all queries (no-object weighted by ``eos``) plus L1 + GIoU over matched
pairs, averaged per target.  Per-image terms are averaged over the batch and
summed over decoder layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .model import LayerOutput
from .tensor import Tensor


@dataclass(frozen=True)
class CostWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    eos: float = 0.1

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0 or (self.cls == self.l1 == self.giou == 0):
            raise ValueError("cost weights must be nonnegative and not all zero")


# -- linear assignment ---------------------------------------------------------

def linear_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of rows to columns.

    Shortest augmenting paths with dual potentials, O(n²m).  Handles
    rectangular matrices by assigning the smaller side completely.  Returns
    ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    n, m = c.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return sorted(pairs)


def match_cost(prob: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
               w: CostWeights) -> np.ndarray:
    """Cost matrix ``targets × queries``."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    c_cls = -prob[:, gt_labels].T
    c_l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - G.pairwise_giou(gt_boxes, boxes)
    return w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def hungarian_match(logits: np.ndarray, boxes: np.ndarray, gt_boxes, gt_labels=None,
                    w: CostWeights = CostWeights()) -> list[tuple[int, int]]:
    """Optimal (query, target) pairs for one image; empty when there are no targets."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return []
    gt_labels = np.zeros(len(gt_boxes), dtype=np.int64) if gt_labels is None else np.asarray(gt_labels)
    cost = match_cost(_softmax(np.asarray(logits)), np.asarray(boxes), gt_boxes, gt_labels, w)
    return sorted((q, g) for g, q in linear_assignment(cost))


# -- losses ---------------------------------------------------------------------

def set_loss(logits: Tensor, boxes: Tensor, gt_boxes, assignment, w: CostWeights = CostWeights(),
             gt_labels=None) -> tuple[Tensor, Tensor]:
    """(L_cls, L_reg) for one image given its assignment."""
    N, C1 = logits.shape
    no_obj = C1 - 1
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.zeros(len(gt_boxes), dtype=np.int64) if gt_labels is None else np.asarray(gt_labels)
    target = np.full(N, no_obj, dtype=np.int64)
    for q, g in assignment:
        target[q] = gt_labels[g]
    class_w = np.ones(C1)
    class_w[no_obj] = w.eos
    l_cls = T.cross_entropy(logits, target, class_w)
    if not assignment:
        return l_cls, Tensor(0.0)
    qi = np.array([q for q, _ in assignment])
    gi = np.array([g for _, g in assignment])
    pred = boxes[qi]
    tgt = gt_boxes[gi]
    n_gt = float(len(gt_boxes))
    l1 = T.absolute(pred - Tensor(tgt)).sum() * (1.0 / n_gt)
    lg = (1.0 - G.giou_tensor(pred, tgt)).sum() * (1.0 / n_gt)
    return l_cls, l1 * w.l1 + lg * w.giou


@dataclass
class BatchLoss:
    value: Tensor
    cls: float
    reg: float
    assignments: list  # [layer][image] -> pairs


def detection_loss(outputs: list[LayerOutput], targets: list, w: CostWeights = CostWeights(),
                   assignments: list | None = None) -> BatchLoss:
    """Mean over images of L_cls + L_reg, summed over decoder layers.

    ``assignments`` (per layer, per image) freezes the matching, which the
    finite-difference checks need.
    """
    n_img = len(targets)
    if n_img == 0:
        raise ValueError("loss needs at least one image")
    total = None
    cls_sum = reg_sum = 0.0
    used = []
    for li, out in enumerate(outputs):
        layer_pairs = []
        for b in range(n_img):
            lg = out.logits[b]
            bx = out.boxes[b]
            if assignments is None:
                pairs = hungarian_match(lg.data, bx.data, targets[b], w=w)
            else:
                pairs = assignments[li][b]
            layer_pairs.append(pairs)
            l_cls, l_reg = set_loss(lg, bx, targets[b], pairs, w)
            term = l_cls + l_reg
            total = term if total is None else total + term
            cls_sum += l_cls.item()
            reg_sum += l_reg.item()
        used.append(layer_pairs)
    return BatchLoss(total * (1.0 / n_img), cls_sum / n_img, reg_sum / n_img, used)


def supervised_loss(outputs: list[LayerOutput], gt_boxes: list, w: CostWeights = CostWeights(),
                    assignments=None) -> BatchLoss:
    if not gt_boxes:
        raise ValueError("supervised loss needs at least one labeled image")
    return detection_loss(outputs, gt_boxes, w, assignments)


def unsupervised_loss(outputs: list[LayerOutput], pseudo_boxes: list, w: CostWeights = CostWeights(),
                      assignments=None) -> BatchLoss:
    """Pseudo-boxes stand in for ground truth; empty sets give a no-object-only term."""
    if not pseudo_boxes:
        raise ValueError("unsupervised loss needs at least one unlabeled image")
    return detection_loss(outputs, pseudo_boxes, w, assignments)


@dataclass
class LossReport:
    total: float
    supervised: float
    unsupervised: float
    alpha: float
    cls: float = 0.0
    reg: float = 0.0

    def to_dict(self) -> dict:
        return {"L": self.total, "L_s": self.supervised, "L_u": self.unsupervised, "alpha": self.alpha,
                "L_cls": self.cls, "L_reg": self.reg}


def total_loss(l_s: Tensor, l_u: Tensor | None, alpha: float) -> tuple[Tensor, LossReport]:
    """L = L_s + α·L_u; with no unsupervised term L is L_s itself."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if l_u is None:
        return l_s, LossReport(l_s.item(), l_s.item(), 0.0, alpha)
    L = l_s + l_u * alpha
    return L, LossReport(L.item(), l_s.item(), l_u.item(), alpha)
