"""Writes the scikit-learn 8x8 digits as gzipped IDX files next to the configs."""
import gzip
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

OUT = Path(__file__).resolve().parent.parent / "configs" / "data"


def write_idx(path, array):
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


digits = load_digits()
images = np.rint(digits.images * 255.0 / 16.0).astype(np.uint8)
write_idx(OUT / "digits-images-idx3-ubyte.gz", images)
write_idx(OUT / "digits-labels-idx1-ubyte.gz", digits.target)
print(images.shape, np.bincount(digits.target))
