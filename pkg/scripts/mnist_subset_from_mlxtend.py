"""Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

Useful where the official MNIST files cannot be downloaded.  The output
directory gets ``train-images-idx3-ubyte`` and ``train-labels-idx1-ubyte``
in the official binary layout, so every qforest loader and config works
unchanged.

    python scripts/mnist_subset_from_mlxtend.py data/mnist
    python scripts/mnist_subset_from_mlxtend.py data/mnist --source mlxtend-0.24.0-py3-none-any.whl
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from qforest.data_io import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_bytes(source):
    if source is None:
        from importlib import resources

        return (resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    source = Path(source)
    if source.suffix == ".whl":
        return zipfile.ZipFile(source).read(MEMBER)
    return source.read_bytes()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--source", help="mlxtend wheel or mnist_5k.csv.gz (default: installed mlxtend)")
    args = parser.parse_args()
    table = np.loadtxt(io.BytesIO(gzip.decompress(read_csv_bytes(args.source))), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte", images)
    write_idx(args.out / "train-labels-idx1-ubyte", labels)
    print(f"wrote {len(labels)} images to {args.out}")


if __name__ == "__main__":
    main()
