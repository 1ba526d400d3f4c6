"""Central finite-difference verification of :func:`tabdet.tensor.backward`."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, zero_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol

    def per_module(self) -> dict[str, tuple[float, str]]:
        """Worst error and parameter per module prefix (``backbone``, ``enc.0``, ``dec.0.align`` ...)."""
        out: dict[str, tuple[float, str]] = {}
        for name, err in self.per_param.items():
            parts = name.split(".")
            key = ".".join(parts[:3] if parts[0] == "dec" and parts[2] == "align" else parts[:2])
            if parts[0] in ("backbone", "query", "head"):
                key = parts[0]
            if key not in out or err > out[key][0]:
                out[key] = (err, name)
        return out


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    # floor keeps near-zero gradients from inflating the ratio
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    params: dict[str, Tensor],
    loss_fn: Callable[[], Tensor],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() with central differences on every parameter coordinate.

    Parameters larger than ``max_coords_per_param`` are checked on a seeded
    random subset of coordinates.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    zero_grad(params)
    loss = loss_fn()
    grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, "")
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, max_coords_per_param, replace=False))
        gflat = grads[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            worst = max(worst, rel_error(gflat[i], num, floor))
        report.per_param[name] = worst
        report.n_coords += len(coords)
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst_param = name
    zero_grad(params)
    return report


@contextmanager
def corrupted_backward(op: str, factor: float = 1.01):
    """Scale the gradients of one tensor op while the block runs.

    A negative control for gradient checks: any op the model uses, wrapped
    this way, must make the check fail.
    """
    original = getattr(T, op)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        bw = out._backward
        if bw is not None:
            out._backward = lambda g: tuple(None if r is None else r * factor for r in bw(g))
        return out

    setattr(T, op, wrapped)
    try:
        yield
    finally:
        setattr(T, op, original)


def model_gradcheck(model_cfg=None, size: int = 32, n_images: int = 2, seed: int = 0,
                    max_coords_per_param: int | None = None, h: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the full detector loss on synthetic pages.

    The matching and the detached reference boxes are recorded once and
    frozen so that every perturbed evaluation differentiates the same graph.
    """
    from .matching import supervised_loss
    from .model import Detector, ModelConfig
    from .synthdata import GenConfig, generate_document

    model = Detector(model_cfg or ModelConfig.tiny(), seed=seed)
    docs = [generate_document(seed + i, GenConfig(size=size)) for i in range(n_images)]
    images = np.stack([d.image for d in docs])
    targets = [d.boxes for d in docs]
    out = model(images)
    refs = [o.trace["ref"] for o in out]
    assignments = supervised_loss(out, targets).assignments
    return finite_diff_check(
        model.params,
        lambda: supervised_loss(model(images, refs=refs), targets, assignments=assignments).value,
        h=h, max_coords_per_param=max_coords_per_param, seed=seed,
    )
