"""Regenerate the files under testdata/.

* tiny IDX / CIFAR-10 fixtures used by the loader tests
* testdata/mnist5k: the 5000-image MNIST sample bundled with the mlxtend
  wheel, re-encoded as gzip IDX (train-* names so ``find_mnist`` picks it up)

Usage: python scripts/make_testdata.py [--mlxtend-wheel PATH]
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from normkit.data import CIFAR_RECORD, write_idx

ROOT = Path(__file__).resolve().parents[1] / "testdata"


def fixtures():
    ROOT.mkdir(exist_ok=True)
    img = np.zeros((1, 2, 3), dtype=np.uint8)
    img[0, 0, 0] = 255
    img[0, 1, 2] = 128
    write_idx(ROOT / "one-images-idx3-ubyte", ROOT / "one-labels-idx1-ubyte", img, [7], compress=False)
    write_idx(ROOT / "one-images-idx3-ubyte.gz", ROOT / "one-labels-idx1-ubyte.gz", img, [7], compress=True)
    full = (ROOT / "one-images-idx3-ubyte").read_bytes()
    (ROOT / "truncated-images-idx3-ubyte").write_bytes(full[:-2])
    bad = bytearray(full)
    bad[3] = 0x01
    (ROOT / "badmagic-images-idx3-ubyte").write_bytes(bytes(bad))
    imgs3 = np.arange(3 * 2 * 3, dtype=np.uint8).reshape(3, 2, 3)
    write_idx(ROOT / "three-images-idx3-ubyte", ROOT / "three-labels-idx1-ubyte", imgs3, [2, 0, 1], compress=False)

    rec = np.zeros((2, CIFAR_RECORD), dtype=np.uint8)
    rec[0, 0] = 3
    rec[0, 1] = 255  # R plane, top-left
    rec[0, 1 + 1024 + 31] = 10  # G plane, top-right
    rec[0, CIFAR_RECORD - 1] = 200  # B plane, bottom-right
    rec[1, 0] = 9
    rec[1, 1:] = 17
    (ROOT / "cifar_two_records.bin").write_bytes(rec.tobytes())
    (ROOT / "cifar_bad_length.bin").write_bytes(rec.tobytes()[:-5])


def mnist5k(wheel: Path):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    arr = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images, labels = arr[:, :-1], arr[:, -1]
    if images.shape[1] != 784:
        # some releases put the label first
        images, labels = arr[:, 1:], arr[:, 0]
    out = ROOT / "mnist5k"
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz",
              images.reshape(-1, 28, 28).astype(np.uint8), labels.astype(np.uint8))
    print(f"wrote {len(labels)} images, class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--mlxtend-wheel", type=Path)
    args = ap.parse_args()
    fixtures()
    if args.mlxtend_wheel:
        mnist5k(args.mlxtend_wheel)
