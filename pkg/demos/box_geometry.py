"""
IoU, GIoU and the box losses
============================

Two overlapping squares and two disjoint ones, measured exactly and by
counting grid cells.
"""

import numpy as np

from vqla.boxes import giou, giou_loss, iou, l1_box_loss, rasterized_iou_oracle, xyxy_to_cxcywh
from vqla.tensor import Tensor

pairs = {
    "overlap": ([0, 0, 2, 2], [1, 1, 3, 3]),
    "disjoint": ([0, 0, 1, 1], [2, 2, 3, 3]),
    "nested": ([1, 1, 2, 2], [0, 0, 3, 3]),
}
for name, (a, b) in pairs.items():
    ri, rg = rasterized_iou_oracle(a, b, grid=512)
    print(f"{name:9s} iou={iou(a, b):.6f} giou={giou(a, b):+.6f}  raster iou={ri:.4f} giou={rg:+.4f}")

# %%
# GIoU keeps a gradient when boxes do not overlap, unlike plain IoU.
a, b = (xyxy_to_cxcywh(np.asarray(x) / 3) for x in pairs["disjoint"])
pred = Tensor(a, requires_grad=True, dtype=np.float64)
loss = giou_loss(pred, b) + l1_box_loss(pred, b)
loss.backward()
print("loss", round(loss.item(), 6), "d loss / d (cx, cy, w, h)", np.round(pred.grad, 4))
