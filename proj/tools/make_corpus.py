#!/usr/bin/env python3
"""Cut the desk-scale image corpus used by the test suites.

Sources are the public-domain sample images that ship with scikit-image and
scikit-learn. Color images are reduced to BT.601 studio-swing luma so every
stored file is already an 8-bit grayscale plane.
"""
import os
import sys

import numpy as np
from PIL import Image
import skimage.data as sd
from sklearn.datasets import load_sample_images


def luma(img):
    if img.ndim == 2:
        return img.astype(np.uint8)
    rgb = img[..., :3].astype(np.float64)
    y = 16.0 + (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def crops(img, size, count):
    h, w = img.shape
    out = []
    # evenly spaced along the diagonal band, snapped to 16 px
    for k in range(count):
        t = (k + 0.5) / count
        r = int(t * (h - size)) // 16 * 16
        c = int((1.0 - t) * (w - size)) // 16 * 16
        out.append(img[r:r + size, c:c + size])
    return out


def main(root):
    samples = load_sample_images().images
    train_sources = {
        "astronaut": sd.astronaut(), "camera": sd.camera(), "coffee": sd.coffee(),
        "chelsea": sd.chelsea(), "rocket": sd.rocket(), "brick": sd.brick(),
        "grass": sd.grass(), "gravel": sd.gravel(), "coins": sd.coins(),
        "ihc": sd.immunohistochemistry(), "china": samples[0],
    }
    test_sources = {"flower": samples[1], "clock": sd.clock(), "hubble": sd.hubble_deep_field(),
                    "moon": sd.moon()}

    train_dir = os.path.join(root, "train")
    test_dir = os.path.join(root, "test")
    lbrc_dir = os.path.join(root, "lbrc")
    for d in (train_dir, test_dir, lbrc_dir):
        os.makedirs(d, exist_ok=True)

    for name, img in train_sources.items():
        for i, crop in enumerate(crops(luma(img), 128, 2)):
            Image.fromarray(crop).save(os.path.join(train_dir, f"{name}_{i}.png"))
    for name, img in test_sources.items():
        crop = crops(luma(img), 128, 1)[0]
        Image.fromarray(crop).save(os.path.join(test_dir, f"{name}.png"))
    lbrc_sources = {"flower": samples[1], "clock": sd.clock(), "motorcycle": sd.stereo_motorcycle()[0]}
    for name, img in lbrc_sources.items():
        crop = crops(luma(img), 256, 1)[0]
        Image.fromarray(crop).save(os.path.join(lbrc_dir, f"{name}.png"))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "tests", "data"))
