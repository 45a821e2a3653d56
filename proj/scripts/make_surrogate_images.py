#!/usr/bin/env python3
"""Write offline surrogate test images (512x512 8-bit PGM) into data/.

The denoising benchmark is defined on the three USC-SIPI images fetched by
scripts/fetch_test_images.sh.  When that download is not possible, this script
provides a locally available stand-in (scikit-image's bundled 'camera') so the
pipeline can still be exercised end to end.
"""

import os
import sys

import numpy as np

try:
    from skimage import data
except ImportError:
    sys.exit("scikit-image is required: pip install scikit-image")


def write_pgm(path, img):
    assert img.dtype == np.uint8 and img.ndim == 2
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data"
    os.makedirs(out_dir, exist_ok=True)
    camera = data.camera()
    assert camera.shape == (512, 512)
    path = os.path.join(out_dir, "camera.pgm")
    write_pgm(path, camera)
    print("wrote", path)


if __name__ == "__main__":
    main()
