"""
Per-sample self-adaptation and its baselines.

``adapt_one`` runs the fine-tune/reset loop on one image:

    repeat n_iters times:
        forward every augmented view under SaN
        map the softmax maps back to the image grid and average them
        threshold the average into pseudo labels
        one SGD step on the cross-entropy of the full-resolution color view
    predict once with the updated weights
    reset every parameter and running statistic to the snapshot

``tta_predict`` is the same pipeline without updates, ``entropy_adapt``
replaces the pseudo-label loss by the mean softmax entropy of the single
original view.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .augment import FusedProbMap, ViewSpec, build_views, fuse, invert_and_align, warp_labels
from .config import AdaptConfig
from .model import ParamSnapshot, TinySegNet, restore_params, select_params, snapshot_params
from .norm import SanConfig, set_norm_mode
from .optim import SGD
from .pseudo_label import PseudoLabelMap, make_pseudo_gt
from .tensor import (
    GuardCounter,
    Tensor,
    cross_entropy,
    entropy_loss,
    guard_scope,
    log_softmax_array,
    no_grad,
    record_guard,
)

logger = logging.getLogger(__name__)

Image = Union[np.ndarray, Tensor]


@dataclass
class AdaptReport:
    """What happened while predicting one image.

    Attributes:
        losses: Loss value of every update step, in order
        coverage: Pseudo-label coverage of every iteration
        wall_ms: Wall-clock time of the whole call
        mask: Final H x W prediction (uint8 class indices)
        probs: Final C x H x W softmax map
        guards: Guard-event counts by kind
        skipped: Iterations whose update was skipped (zero coverage)
        views: Number of views per iteration
        pseudo: Pseudo labels of the last iteration, if any
    """

    losses: list[float] = field(default_factory=list)
    coverage: list[float] = field(default_factory=list)
    wall_ms: float = 0.0
    mask: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    guards: dict[str, int] = field(default_factory=dict)
    skipped: int = 0
    views: int = 0
    pseudo: Optional[PseudoLabelMap] = None


def _image_array(image: Image) -> np.ndarray:
    return image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_array(logits)).astype(np.float32)


def _mask_of(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=0).astype(np.uint8)


# ============================================
# Plain prediction
# ============================================

def predict_plain(net: TinySegNet, image: Image, norm: SanConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single forward of the original image: (H x W mask, C x H x W softmax)."""
    x = _image_array(image)
    net.eval()
    set_norm_mode(net, norm)
    with no_grad():
        logits = net(Tensor(x[None]))
    probs = softmax_array(logits.data)[0]
    return _mask_of(probs), probs


# ============================================
# Views
# ============================================

def forward_views(
    net: TinySegNet,
    views: Sequence[tuple[ViewSpec, Tensor]],
    with_grad: Sequence[int] = (),
) -> list[Tensor]:
    """1 x C x h x w logits per view.

    Views of equal size are forwarded as one mini-batch (normalization
    statistics are per view, so batching does not change the result). Only
    views listed in ``with_grad`` record a graph.
    """
    grad_set = set(with_grad)
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, (_, view) in enumerate(views):
        groups.setdefault(view.shape, []).append(i)

    out: list[Optional[Tensor]] = [None] * len(views)
    for idxs in groups.values():
        tracked = [i for i in idxs if i in grad_set]
        frozen = [i for i in idxs if i not in grad_set]
        if tracked:
            logits = net(Tensor(np.stack([views[i][1].data for i in tracked])))
            if len(tracked) == 1:
                out[tracked[0]] = logits
            else:
                for j, i in enumerate(tracked):
                    out[i] = logits[j:j + 1]
        if frozen:
            with no_grad():
                logits = net(Tensor(np.stack([views[i][1].data for i in frozen])))
            for j, i in enumerate(frozen):
                out[i] = Tensor(logits.data[j:j + 1])
    return out  # type: ignore[return-value]


def fuse_views(
    views: Sequence[tuple[ViewSpec, Tensor]],
    logits: Sequence[Tensor],
    orig_h: int,
    orig_w: int,
) -> FusedProbMap:
    aligned = [
        invert_and_align(spec, softmax_array(l.data)[0], orig_h, orig_w)
        for (spec, _), l in zip(views, logits)
    ]
    return fuse(aligned)


def _identity_index(views: Sequence[tuple[ViewSpec, Tensor]]) -> int:
    for i, (spec, _) in enumerate(views):
        if spec.is_identity:
            return i
    raise AssertionError("view set lacks the original-resolution color view")


def tta_fused(net: TinySegNet, image: Image, cfg: AdaptConfig) -> FusedProbMap:
    """Average of the aligned softmax maps of every view (no updates)."""
    x = _image_array(image)
    net.eval()
    set_norm_mode(net, cfg.norm)
    views = build_views(x, cfg)
    logits = forward_views(net, views)
    return fuse_views(views, logits, x.shape[1], x.shape[2])


def tta_predict(net: TinySegNet, image: Image, cfg: AdaptConfig) -> np.ndarray:
    """Argmax of :func:`tta_fused`."""
    return _mask_of(tta_fused(net, image, cfg).probs.data)


# ============================================
# Self-adaptation
# ============================================

class _Session:
    """Selects the adapted parameters and puts everything back on exit."""

    def __init__(self, net: TinySegNet, groups: Sequence[str], snapshot: Optional[ParamSnapshot]) -> None:
        self.net = net
        self.snapshot = snapshot if snapshot is not None else snapshot_params(net)
        self.params = select_params(net, groups)
        self._flags = [(t, t.requires_grad) for t in net.parameters()]

    def __enter__(self) -> "_Session":
        chosen = {id(t) for t in self.params}
        for t, _ in self._flags:
            t.requires_grad = id(t) in chosen
        self.net.eval()
        return self

    def __exit__(self, *exc: object) -> None:
        restore_params(self.net, self.snapshot)
        for t, flag in self._flags:
            t.requires_grad = flag


def _pseudo_loss(
    views: Sequence[tuple[ViewSpec, Tensor]],
    logits: Sequence[Tensor],
    pseudo: PseudoLabelMap,
    cfg: AdaptConfig,
    identity: int,
) -> Tensor:
    if not cfg.loss_on_all_views:
        return cross_entropy(logits[identity], pseudo.labels[None])
    total: Optional[Tensor] = None
    for (spec, _), l in zip(views, logits):
        term = cross_entropy(l, warp_labels(spec, pseudo.labels)[None])
        total = term if total is None else total + term
    return total * (1.0 / len(views))


def adapt_one(
    net: TinySegNet,
    image: Image,
    cfg: AdaptConfig,
    snapshot: Optional[ParamSnapshot] = None,
    freeze_pseudo: bool = False,
) -> tuple[np.ndarray, AdaptReport]:
    """Self-adapt on one image, predict, and reset.

    Args:
        net: Network holding the source parameters
        image: 3 x H x W image in [0, 1]
        cfg: Adaptation hyperparameters
        snapshot: Parameters to reset to (taken at entry when omitted)
        freeze_pseudo: Build pseudo labels once and reuse them every
            iteration (descent check mode)

    Returns:
        (mask, report). On return every parameter and running statistic of
        ``net`` equals ``snapshot`` bit for bit.
    """
    start = time.perf_counter()
    x = _image_array(image)
    h, w = x.shape[1:]
    report = AdaptReport()
    counter = GuardCounter()

    with _Session(net, cfg.adapt_groups, snapshot) as session, guard_scope(counter):
        set_norm_mode(net, cfg.norm)
        opt = SGD(session.params, lr=cfg.eta, momentum=cfg.momentum_adapt)
        views = build_views(x, cfg)
        report.views = len(views)
        identity = _identity_index(views)
        tracked = range(len(views)) if cfg.loss_on_all_views else (identity,)
        frozen: Optional[PseudoLabelMap] = None

        for it in range(cfg.n_iters):
            logits = forward_views(net, views, with_grad=tracked)
            if frozen is not None:
                pseudo = frozen
            else:
                pseudo = make_pseudo_gt(fuse_views(views, logits, h, w), cfg.psi)
                if freeze_pseudo:
                    frozen = pseudo
            report.pseudo = pseudo
            report.coverage.append(pseudo.coverage)
            if pseudo.is_empty:
                logger.warning(f"iteration {it}: pseudo labels cover no pixel, skipping the update")
                record_guard("zero_coverage")
                report.skipped += 1
                continue

            opt.zero_grad()
            loss = _pseudo_loss(views, logits, pseudo, cfg, identity)
            loss.backward()
            opt.step()
            report.losses.append(loss.item())
            logger.debug(f"iteration {it}: loss={report.losses[-1]:.5f} coverage={pseudo.coverage:.4f}")

        report.mask, report.probs = predict_plain(net, x, cfg.norm)

    report.guards = counter.as_dict()
    report.wall_ms = (time.perf_counter() - start) * 1000.0
    return report.mask, report


def entropy_adapt(
    net: TinySegNet,
    image: Image,
    cfg: AdaptConfig,
    snapshot: Optional[ParamSnapshot] = None,
) -> tuple[np.ndarray, AdaptReport]:
    """Minimize the mean softmax entropy of the original view for ``n_iters`` steps, predict, reset."""
    start = time.perf_counter()
    x = _image_array(image)
    report = AdaptReport(views=1)
    counter = GuardCounter()

    with _Session(net, cfg.adapt_groups, snapshot) as session, guard_scope(counter):
        set_norm_mode(net, cfg.norm)
        opt = SGD(session.params, lr=cfg.eta, momentum=cfg.momentum_adapt)
        batch = Tensor(x[None])
        for it in range(cfg.n_iters):
            opt.zero_grad()
            loss = entropy_loss(net(batch))
            loss.backward()
            opt.step()
            report.losses.append(loss.item())
            logger.debug(f"iteration {it}: entropy={report.losses[-1]:.5f}")
        report.mask, report.probs = predict_plain(net, x, cfg.norm)

    report.guards = counter.as_dict()
    report.wall_ms = (time.perf_counter() - start) * 1000.0
    return report.mask, report
