"""Cooperative multi-agent BEV detection sandbox.

Thin wrapper over the C++ core: scene simulation, the fusion detector,
rotated-box geometry, and the AP evaluation protocol.
"""

import json

from coopdet._core import (
    Box3D,
    Model,
    bench_attention,
    bev_iou_rotated,
    dataset_ground_truth,
    dataset_size,
    evaluate,
    generate_dataset,
    iou3d,
    nms,
    softmax,
    train,
)

__all__ = [
    "Box3D",
    "Model",
    "bench_attention",
    "bev_iou_rotated",
    "dataset_ground_truth",
    "dataset_size",
    "evaluate",
    "evaluate_report",
    "generate_dataset",
    "iou3d",
    "nms",
    "softmax",
    "train",
]

__version__ = "0.1.0"


def evaluate_report(detections, ground_truth, iou3d=False):
    """Like evaluate(), but returns the report as a dict."""
    return json.loads(evaluate(detections, ground_truth, iou3d))
