"""Graymap / pixmap dumps of observations, masks and Q-maps."""
import logging
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

MARKER_COLOR = (255, 0, 0)


def to_graymap(values, low=None, high=None):
    """Scale ``values`` linearly into 0..255; a constant map renders mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"A graymap needs a 2-d array, got {values.shape}")
    low = values.min() if low is None else low
    high = values.max() if high is None else high
    if high - low <= 0:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (np.clip(values, low, high) - low) / (high - low)
    return np.round(scaled * 255).astype(np.uint8)


def to_pixmap(image):
    """``[3, h, w]`` values in [0, 1] to an ``[h, w, 3]`` byte image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"A pixmap needs a [3, h, w] array, got {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_graymap(path, values, low=None, high=None):
    path = Path(path).with_suffix('.pgm')
    iio.imwrite(path, to_graymap(values, low, high))
    return path


def write_mask(path, mask):
    path = Path(path).with_suffix('.pgm')
    iio.imwrite(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))
    return path


def write_pixmap(path, image):
    path = Path(path).with_suffix('.ppm')
    iio.imwrite(path, to_pixmap(image) if image.shape[0] == 3 else image)
    return path


def action_overlay(values, pixel, normal=None, length=4):
    """Gray rendering of ``values`` with the chosen pixel (and gripper closing axis) marked."""
    gray = to_graymap(values)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    height, width = gray.shape
    row, col = pixel
    if normal is not None:
        # rows grow downwards while the world y axis points up
        for step in range(-length, length + 1):
            r = int(round(row - step * normal[1]))
            c = int(round(col + step * normal[0]))
            if 0 <= r < height and 0 <= c < width:
                rgb[r, c] = (255, 255, 0)
    rgb[row, col] = MARKER_COLOR
    return rgb
