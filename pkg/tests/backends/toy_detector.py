"""Test detector: one box around all pixels deviating from the median color.

Emits normalized bottom-left-origin coordinates, class 2, confidence 0.9.
Usage: toy_detector.py detect  (PNG on stdin, JSON array on stdout)
"""
import io
import json
import sys

import numpy as np
from PIL import Image

if __name__ == "__main__":
    op = sys.argv[1] if len(sys.argv) > 1 else ""
    if op != "detect":
        sys.exit(2)
    img = Image.open(io.BytesIO(sys.stdin.buffer.read())).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    h, w = arr.shape[:2]
    background = np.median(arr.reshape(-1, 3), axis=0)
    mask = np.any(np.abs(arr - background) > 0.1, axis=2)
    if not mask.any():
        print(json.dumps([]))
        sys.exit(0)
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    box = {
        "x1": c0 / w,
        "y1": 1.0 - r1 / h,  # image rows grow downward; flip to bottom-left origin
        "x2": c1 / w,
        "y2": 1.0 - r0 / h,
        "class_id": 2,
        "confidence": 0.9,
    }
    print(json.dumps([box]))
