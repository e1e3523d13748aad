"""Desk-scale datasets and the train/test/attacker-aux split."""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError, InputContractError

DATASET_KINDS = ("synthetic_gaussian_classes", "synthetic_structured_images", "image_folder")


@dataclass
class ArrayDataset:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InputContractError("inputs and labels differ in length")

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def batch(self, indices):
        indices = torch.as_tensor(indices, dtype=torch.long)
        if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= len(self)):
            raise InputContractError(f"batch index out of dataset range [0, {len(self)})")
        return Batch(self.inputs[indices], self.labels[indices], indices, dataset_size=len(self))

    def subset(self, indices):
        indices = torch.as_tensor(indices, dtype=torch.long)
        return ArrayDataset(self.inputs[indices], self.labels[indices])


@dataclass
class Batch:
    inputs: torch.Tensor
    labels: torch.Tensor
    indices: torch.Tensor
    dataset_size: int = None

    def __post_init__(self):
        b = self.inputs.shape[0]
        if b < 1:
            raise InputContractError("batch must hold at least one sample")
        if self.labels.shape != (b,) or self.indices.shape != (b,):
            raise InputContractError("labels and indices must be vectors aligned with inputs")
        if self.indices.unique().numel() != b:
            raise InputContractError("batch indices must be unique")
        if int(self.indices.min()) < 0 or (
            self.dataset_size is not None and int(self.indices.max()) >= self.dataset_size
        ):
            raise InputContractError(f"batch index out of dataset range [0, {self.dataset_size})")

    def __len__(self):
        return int(self.inputs.shape[0])


@dataclass
class DatasetSpec:
    kind: str = "synthetic_structured_images"
    size: int = 2000
    input_shape: tuple = (1, 16, 16)
    num_classes: int = 10
    test_fraction: float = 0.2
    aux_size: int = 40
    seed: int = 0
    root: str = None  # image_folder only

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError("test_fraction must be in (0, 1)")
        if self.aux_size < 0:
            raise ConfigurationError("aux_size must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class DataSplits:
    train: ArrayDataset
    test: ArrayDataset
    aux: ArrayDataset
    spec: DatasetSpec = field(default=None, repr=False)


def gaussian_classes(n, input_shape=(1, 4, 4), num_classes=10, separation=2.0, seed=0):
    """Isotropic Gaussian clusters around random class means."""
    rng = np.random.default_rng(seed)
    dim = math.prod(input_shape)
    means = rng.normal(scale=separation / math.sqrt(2), size=(num_classes, dim))
    y = rng.integers(0, num_classes, size=n)
    x = means[y] + rng.normal(size=(n, dim))
    x = x.reshape((n,) + tuple(input_shape))
    return torch.tensor(x, dtype=torch.float32), torch.tensor(y, dtype=torch.long)


def _shape_mask(label, u, v):
    rho = np.sqrt(u * u + v * v)
    inside = rho < 0.85
    masks = [
        (np.abs(v) < 0.2) & (np.abs(u) < 0.75),  # horizontal bar
        (np.abs(u) < 0.2) & (np.abs(v) < 0.75),  # vertical bar
        ((np.abs(v) < 0.17) | (np.abs(u) < 0.17)) & (np.abs(u) < 0.75) & (np.abs(v) < 0.75),  # plus
        (np.abs(u - v) < 0.28) & inside,  # diagonal
        (np.abs(u + v) < 0.28) & inside,  # anti-diagonal
        (np.abs(u) < 0.45) & (np.abs(v) < 0.45),  # square
        (rho > 0.42) & (rho < 0.72),  # ring
        rho < 0.5,  # disk
        ((np.abs(u - v) < 0.22) | (np.abs(u + v) < 0.22)) & inside,  # cross
        (v > -0.55) & (v < 0.6) & (np.abs(u) < (0.6 - v) * 0.6),  # triangle
    ]
    return masks[label % len(masks)].astype(np.float64)


def structured_images(n, input_shape=(1, 16, 16), num_classes=10, seed=0, shape_amplitude=0.7, texture_amplitude=0.1, shift=0.15):
    """Class-dependent shapes drawn over a label-independent smooth texture.

    The texture, shape position and contrast are private per-sample content;
    only the shape identity is tied to the label.
    """
    c, h, w = input_shape
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, size=n)
    grid_v, grid_u = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    x = np.empty((n, c, h, w))
    for i in range(n):
        du, dv = rng.uniform(-shift, shift, size=2)
        mask = _shape_mask(int(y[i]), grid_u - du, grid_v - dv)
        mask = ndimage.gaussian_filter(mask, 0.5)
        amp = shape_amplitude * rng.uniform(0.8, 1.2)
        for ch in range(c):
            tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), 1.5, mode="wrap")
            tex = (tex - tex.mean()) / (tex.std() + 1e-12)
            x[i, ch] = 0.3 + texture_amplitude * tex + amp * mask + 0.02 * rng.normal(size=(h, w))
    return torch.tensor(np.clip(x, 0.0, 1.0), dtype=torch.float32), torch.tensor(y, dtype=torch.long)


def image_folder(root, input_shape):
    """Load ``root/<class>/<image>`` into [0, 1] tensors; classes sorted by name."""
    from PIL import Image

    c, h, w = input_shape
    mode = {1: "L", 3: "RGB"}.get(c)
    if mode is None:
        raise ConfigurationError("image_folder supports 1 or 3 channels")
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ConfigurationError(f"no class directories under {root}")
    xs, ys = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp"):
                continue
            img = Image.open(path).convert(mode).resize((w, h))
            arr = np.asarray(img, dtype=np.float64) / 255.0
            xs.append(arr.reshape(h, w, c).transpose(2, 0, 1))
            ys.append(label)
    return torch.tensor(np.stack(xs), dtype=torch.float32), torch.tensor(ys, dtype=torch.long)


def make_splits(spec):
    """Generate (or load) the data and carve out disjoint train/test/aux sets."""
    if spec.kind == "synthetic_gaussian_classes":
        x, y = gaussian_classes(spec.size, spec.input_shape, spec.num_classes, seed=spec.seed)
    elif spec.kind == "synthetic_structured_images":
        x, y = structured_images(spec.size, spec.input_shape, spec.num_classes, seed=spec.seed)
    else:
        x, y = image_folder(spec.root, spec.input_shape)
    n = x.shape[0]
    n_test = int(round(spec.test_fraction * n))
    if spec.aux_size + n_test >= n:
        raise ConfigurationError("aux and test splits leave no training data")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(spec.seed + 7919))
    aux_idx = perm[: spec.aux_size]
    test_idx = perm[spec.aux_size : spec.aux_size + n_test]
    train_idx = perm[spec.aux_size + n_test :]
    full = ArrayDataset(x, y)
    return DataSplits(full.subset(train_idx), full.subset(test_idx), full.subset(aux_idx), spec)
