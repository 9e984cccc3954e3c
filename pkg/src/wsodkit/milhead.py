"""Two-stream MIL detection head over precomputed proposal features.

A head scores each proposal twice through parallel affine maps: a detection
stream, normalized per class across proposals, and a classification stream,
normalized per proposal across classes. Their elementwise product gives
per-proposal class evidence; summing it per class and squashing through a
sigmoid yields the image-level class probability that the weak image labels
supervise with binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wsodkit import numkit
from wsodkit.errors import ShapeError
from wsodkit.numkit import Param


@dataclass
class HeadParams:
    """Affine parameters of the detection and classification streams."""

    w_det: Param
    b_det: Param
    w_cls: Param
    b_cls: Param

    @classmethod
    def create(
        cls,
        prefix: str,
        rng: np.random.Generator,
        feat_dim: int,
        num_classes: int,
        scale: float,
    ) -> "HeadParams":
        return cls(
            w_det=Param(f"{prefix}.det.w", rng.normal(0.0, scale, (feat_dim, num_classes))),
            b_det=Param(f"{prefix}.det.b", np.zeros(num_classes)),
            w_cls=Param(f"{prefix}.cls.w", rng.normal(0.0, scale, (feat_dim, num_classes))),
            b_cls=Param(f"{prefix}.cls.b", np.zeros(num_classes)),
        )

    def params(self) -> list[Param]:
        return [self.w_det, self.b_det, self.w_cls, self.b_cls]

    @property
    def num_classes(self) -> int:
        return self.w_det.value.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.w_det.value.shape[0]


@dataclass
class ScorePack:
    """All per-image score stages, raw scores through image probabilities.

    ``det_prob`` columns each sum to 1 (softmax over proposals per class),
    ``cls_prob`` rows each sum to 1 (softmax over classes per proposal),
    ``combined`` is their product, and ``image_prob[c]`` squashes the
    column sum of ``combined``.
    """

    det_scores: np.ndarray
    cls_scores: np.ndarray
    det_prob: np.ndarray
    cls_prob: np.ndarray
    combined: np.ndarray
    image_prob: np.ndarray


def score(features: np.ndarray, head: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Raw detection and classification scores, each (R, C)."""
    det = numkit.affine(features, head.w_det.value, head.b_det.value)
    cls = numkit.affine(features, head.w_cls.value, head.b_cls.value)
    return det, cls


def image_prediction(combined: np.ndarray, sigma_on_sum: bool = True) -> np.ndarray:
    """Per-class image probability from combined proposal evidence.

    With ``sigma_on_sum`` the per-class sum is squashed through a sigmoid,
    so each entry lies in [0.5, sigmoid(1)]; without it the raw sum is used
    (clamped away from 0 and 1 before any log downstream).
    """
    total = combined.sum(axis=0)
    if sigma_on_sum:
        return numkit.sigmoid(total)
    return numkit.clamp_unit(total)


def probabilities(
    det_scores: np.ndarray, cls_scores: np.ndarray, sigma_on_sum: bool = True
) -> ScorePack:
    """Normalize raw scores into a full ScorePack."""
    if det_scores.shape != cls_scores.shape:
        raise ShapeError(
            f"det/cls score shapes differ: {det_scores.shape} vs {cls_scores.shape}"
        )
    det_prob = numkit.softmax_cols(det_scores)
    cls_prob = numkit.softmax_rows(cls_scores)
    combined = det_prob * cls_prob
    return ScorePack(
        det_scores=det_scores,
        cls_scores=cls_scores,
        det_prob=det_prob,
        cls_prob=cls_prob,
        combined=combined,
        image_prob=image_prediction(combined, sigma_on_sum),
    )


def label_vector(labels: set[int], num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float64)
    for c in labels:
        y[c] = 1.0
    return y


def mil_loss(image_prob: np.ndarray, labels: set[int]) -> float:
    """Binary cross-entropy between image probabilities and image labels.

    Sums over classes; probabilities are clamped before the logs.
    """
    y = label_vector(labels, image_prob.shape[0])
    p = numkit.clamp_unit(image_prob)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())


def mil_chain(
    rgb_features: np.ndarray,
    rgb_head: HeadParams,
    labels: set[int],
    depth_features: np.ndarray | None = None,
    depth_head: HeadParams | None = None,
    attention: np.ndarray | None = None,
    sigma_on_sum: bool = True,
    grad_scale: float = 0.0,
) -> tuple[float, ScorePack, np.ndarray]:
    """Full MIL forward pass with optional fused depth stream and attention.

    When ``depth_features``/``depth_head`` are given, raw scores are the
    elementwise sum of both streams. ``attention`` is an optional (R, C)
    multiplier applied to the combined evidence only on the path into the
    image prediction; the returned pack and pre-attention ``combined`` are
    untouched so downstream mining sees raw evidence.

    With ``grad_scale`` nonzero, gradients of ``grad_scale * loss`` are
    accumulated into the head parameters.

    Returns (loss, pack, attended_combined).
    """
    fused = depth_features is not None
    if fused and depth_head is None:
        raise ShapeError("depth features given without a depth head")
    v_det, v_cls = score(rgb_features, rgb_head)
    if fused:
        d_det, d_cls = score(depth_features, depth_head)
        f_det, f_cls = v_det + d_det, v_cls + d_cls
    else:
        f_det, f_cls = v_det, v_cls

    det_prob = numkit.softmax_cols(f_det)
    cls_prob = numkit.softmax_rows(f_cls)
    combined = det_prob * cls_prob
    attended = combined if attention is None else combined * attention
    total = attended.sum(axis=0)
    if sigma_on_sum:
        image_prob = numkit.sigmoid(total)
    else:
        image_prob = numkit.clamp_unit(total)
    y = label_vector(labels, image_prob.shape[0])
    p = numkit.clamp_unit(image_prob)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())

    pack = ScorePack(
        det_scores=f_det,
        cls_scores=f_cls,
        det_prob=det_prob,
        cls_prob=cls_prob,
        combined=combined,
        image_prob=image_prob,
    )

    if grad_scale != 0.0:
        # d loss / d image_prob through the clamped logs.
        dlogp = numkit.dlog_clamped(image_prob)
        dlog1m = numkit.dlog_clamped(1.0 - image_prob)
        d_prob = -(y * dlogp - (1.0 - y) * dlog1m)
        if sigma_on_sum:
            d_total = d_prob * image_prob * (1.0 - image_prob)
        else:
            inside = (total > numkit.LOG_EPS) & (total < 1.0 - numkit.LOG_EPS)
            d_total = np.where(inside, d_prob, 0.0)
        d_attended = np.broadcast_to(d_total, attended.shape)
        d_combined = d_attended if attention is None else d_attended * attention
        d_det_prob = d_combined * cls_prob
        d_cls_prob = d_combined * det_prob
        d_f_det = numkit.softmax_cols_backward(det_prob, d_det_prob)
        d_f_cls = numkit.softmax_rows_backward(cls_prob, d_cls_prob)
        s = grad_scale
        _, dw, db = numkit.affine_backward(rgb_features, rgb_head.w_det.value, d_f_det)
        rgb_head.w_det.grad += s * dw
        rgb_head.b_det.grad += s * db
        _, dw, db = numkit.affine_backward(rgb_features, rgb_head.w_cls.value, d_f_cls)
        rgb_head.w_cls.grad += s * dw
        rgb_head.b_cls.grad += s * db
        if fused:
            _, dw, db = numkit.affine_backward(
                depth_features, depth_head.w_det.value, d_f_det
            )
            depth_head.w_det.grad += s * dw
            depth_head.b_det.grad += s * db
            _, dw, db = numkit.affine_backward(
                depth_features, depth_head.w_cls.value, d_f_cls
            )
            depth_head.w_cls.grad += s * dw
            depth_head.b_cls.grad += s * db

    return loss, pack, attended
