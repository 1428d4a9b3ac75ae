#!/usr/bin/env python3
"""Builds data/mini_hr: 20 RGB 288x288 crops from the sample images shipped
with scikit-image and scikit-learn. Crops are area-downscaled from larger
regions so they are sharp and free of source compression blocks."""
import os
import sys

import numpy as np
from PIL import Image
from skimage import data as skdata
from sklearn.datasets import load_sample_images

SIZE = 288


def rgb(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return img[..., :3].astype(np.uint8)


def crop(img, y, x, region):
    tile = Image.fromarray(img[y:y + region, x:x + region])
    return tile.resize((SIZE, SIZE), Image.BOX)


def main(out_dir):
    china, flower = load_sample_images().images
    sources = {
        "astronaut": (rgb(skdata.astronaut()), [(0, 0, 512), (200, 150, 300)]),
        "coffee": (rgb(skdata.coffee()), [(0, 0, 400), (50, 250, 340)]),
        "chelsea": (rgb(skdata.chelsea()), [(0, 100, 300)]),
        "rocket": (rgb(skdata.rocket()), [(0, 0, 427), (60, 300, 340)]),
        "moto_left": (rgb(skdata.stereo_motorcycle()[0]), [(0, 0, 500), (0, 240, 500)]),
        "moto_right": (rgb(skdata.stereo_motorcycle()[1]), [(100, 100, 400), (50, 300, 440)]),
        "china": (rgb(china), [(0, 0, 427), (0, 213, 427)]),
        "flower": (rgb(flower), [(0, 100, 427), (60, 0, 360)]),
        "camera": (rgb(skdata.camera()), [(0, 0, 512)]),
        "gravel": (rgb(skdata.gravel()), [(0, 0, 512)]),
        "grass": (rgb(skdata.grass()), [(0, 0, 512)]),
        "brick": (rgb(skdata.brick()), [(0, 0, 512)]),
        "ihc": (rgb(skdata.immunohistochemistry()), [(0, 0, 512)]),
    }
    os.makedirs(out_dir, exist_ok=True)
    count = 0
    for name, (img, boxes) in sources.items():
        for i, (y, x, region) in enumerate(boxes):
            tile = crop(img, y, x, region)
            tile.save(os.path.join(out_dir, f"{name}_{i}.png"))
            count += 1
    print(f"wrote {count} images to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mini_hr")
