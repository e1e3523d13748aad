"""Three-way split network: device head, server encoder, device classifier.

The head and classifier stay on the edge device; only the encoder runs on the
server.  Any ``nn.Module`` can serve as one of the three parts as long as the
shapes chain together.
"""

import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputContractError

CHECKPOINT_MAGIC = b"PSCKPT"
CHECKPOINT_VERSION = 1


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) shortcut."""

    def __init__(self, in_channels, out_channels, stride=1, batch_norm=False):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=not batch_norm)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=not batch_norm)
        self.bn1 = nn.BatchNorm2d(out_channels) if batch_norm else nn.Identity()
        self.bn2 = nn.BatchNorm2d(out_channels) if batch_norm else nn.Identity()
        self.relu = nn.ReLU()
        if stride != 1 or in_channels != out_channels:
            layers = [nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=not batch_norm)]
            if batch_norm:
                layers.append(nn.BatchNorm2d(out_channels))
            self.shortcut = nn.Sequential(*layers)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ChannelShift(nn.Module):
    """Learnable per-channel offset (zero-initialized)."""

    def __init__(self, channels):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return x + self.bias.view(1, -1, 1, 1)


class SplitModel(nn.Module):
    """Container for the head (f^h), encoder (f^e) and classifier (f^c).

    Output shapes of the head and encoder are traced once at construction with
    a zero input, so every later call can be checked against them.
    """

    def __init__(self, head, encoder, classifier, input_shape, num_classes):
        super().__init__()
        self.head = head
        self.encoder = encoder
        self.classifier = classifier
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        dtype = next(self.parameters()).dtype if any(True for _ in self.parameters()) else torch.float32
        was_training = self.training
        self.eval()
        with torch.no_grad():
            probe = torch.zeros((1,) + self.input_shape, dtype=dtype)
            r = self.head(probe)
            z = self.encoder(r)
            logits = self.classifier(z)
        self.train(was_training)
        self.repr_shape = tuple(r.shape[1:])
        self.feature_shape = tuple(z.shape[1:])
        if tuple(logits.shape[1:]) != (self.num_classes,):
            raise ConfigurationError(
                f"classifier emits shape {tuple(logits.shape[1:])}, expected ({self.num_classes},)"
            )

    @staticmethod
    def _check(t, expected, what):
        if not torch.is_tensor(t) or t.dim() != len(expected) + 1 or tuple(t.shape[1:]) != expected:
            got = tuple(t.shape) if torch.is_tensor(t) else type(t).__name__
            raise InputContractError(f"{what}: expected (B, {', '.join(map(str, expected))}), got {got}")
        if t.shape[0] < 1:
            raise InputContractError(f"{what}: empty batch")

    def forward_head(self, inputs):
        self._check(inputs, self.input_shape, "inputs")
        return self.head(inputs)

    def forward_encoder(self, r):
        self._check(r, self.repr_shape, "representation")
        return self.encoder(r)

    def forward_classifier(self, z):
        self._check(z, self.feature_shape, "feature")
        return self.classifier(z)

    def full_forward(self, inputs):
        return self.forward_classifier(self.forward_encoder(self.forward_head(inputs)))

    forward = full_forward


def init_parameters(module, seed):
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.

    Uses a private generator so results do not depend on torch's global RNG.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * math.prod(w.shape[2:])
            else:
                fan_in = math.prod(w.shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def _desk_parts(input_shape, num_classes, width):
    c, h, w = input_shape
    # fixed-scale normalization keeps r from shrinking toward zero under the defense
    head = nn.Sequential(
        nn.Conv2d(c, width, 3, padding=1, bias=False), nn.BatchNorm2d(width, affine=False), ChannelShift(width), nn.ReLU()
    )
    encoder = nn.Sequential(
        nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
        nn.ReLU(),
    )
    fh, fw = (h + 3) // 4, (w + 3) // 4
    classifier = nn.Sequential(
        ResidualBlock(2 * width, 2 * width),
        nn.Flatten(),
        nn.Linear(2 * width * fh * fw, num_classes),
    )
    return head, encoder, classifier


def _paper_like_parts(input_shape, num_classes, width):
    # CIFAR-style ResNet18: device keeps the stem conv and the last basic block.
    c = input_shape[0]
    w = width
    head = nn.Sequential(nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
    encoder = nn.Sequential(
        ResidualBlock(w, w, batch_norm=True),
        ResidualBlock(w, w, batch_norm=True),
        ResidualBlock(w, 2 * w, stride=2, batch_norm=True),
        ResidualBlock(2 * w, 2 * w, batch_norm=True),
        ResidualBlock(2 * w, 4 * w, stride=2, batch_norm=True),
        ResidualBlock(4 * w, 4 * w, batch_norm=True),
        ResidualBlock(4 * w, 8 * w, stride=2, batch_norm=True),
    )
    classifier = nn.Sequential(
        ResidualBlock(8 * w, 8 * w, batch_norm=True),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(8 * w, num_classes),
    )
    return head, encoder, classifier


def build_default_architecture(input_shape, num_classes, scale="desk", seed=0, width=None, dtype=torch.float32):
    """Build a seeded split model.

    ``desk``: conv head, two strided convs on the server, residual block plus
    linear head on the device.  ``paper-like``: ResNet18 split after the stem
    convolution and before the last basic block.
    """
    try:
        input_shape = tuple(int(d) for d in input_shape)
    except (TypeError, ValueError):
        raise ConfigurationError(f"input_shape must be a (channels, height, width) triple, got {input_shape!r}")
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ConfigurationError(f"input_shape must be a positive (channels, height, width) triple, got {input_shape}")
    if int(num_classes) < 2:
        raise ConfigurationError("need at least two classes")
    if scale == "desk":
        head, encoder, classifier = _desk_parts(input_shape, num_classes, width or 8)
    elif scale in ("paper-like", "paper_like"):
        if min(input_shape[1:]) < 8:
            raise ConfigurationError("paper-like architecture needs spatial size >= 8")
        head, encoder, classifier = _paper_like_parts(input_shape, num_classes, width or 64)
    else:
        raise ConfigurationError(f"unknown scale {scale!r}")
    parts = nn.ModuleList([head, encoder, classifier])
    init_parameters(parts, seed)
    parts.to(dtype)
    model = SplitModel(head, encoder, classifier, input_shape, num_classes)
    # enough to rebuild any part elsewhere (no weights)
    model.arch = {
        "input_shape": list(input_shape), "num_classes": int(num_classes), "scale": scale, "seed": int(seed),
        "width": width, "dtype": str(dtype).replace("torch.", ""),
    }
    return model


# -- checkpoints -----------------------------------------------------------------


def _float_entries(state):
    return {k: v for k, v in state.items() if torch.is_tensor(v) and v.is_floating_point()}


def save_checkpoint(path, modules):
    """Write named float arrays in the versioned ``PSCKPT`` layout.

    ``modules`` maps a prefix to an ``nn.Module`` (or is a single module).
    """
    if isinstance(modules, nn.Module):
        modules = {"": modules}
    arrays = {}
    for prefix, module in modules.items():
        for name, t in _float_entries(module.state_dict()).items():
            arrays[f"{prefix}.{name}" if prefix else name] = t.detach().cpu().numpy()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:6] != CHECKPOINT_MAGIC:
        raise InputContractError("not a PSCKPT checkpoint")
    version, count = struct.unpack_from("<II", data, 6)
    if version != CHECKPOINT_VERSION:
        raise InputContractError(f"unsupported checkpoint version {version}")
    pos = 14
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = math.prod(dims) * 4
            if pos + size > len(data):
                raise InputContractError(f"checkpoint truncated in {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=math.prod(dims), offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as exc:
        raise InputContractError(f"checkpoint truncated: {exc}") from None
    return out


def load_checkpoint(path, modules):
    """Load arrays written by :func:`save_checkpoint` into the given modules."""
    arrays = read_checkpoint(path)
    if isinstance(modules, nn.Module):
        modules = {"": modules}
    for prefix, module in modules.items():
        state = module.state_dict()
        for name in _float_entries(state):
            key = f"{prefix}.{name}" if prefix else name
            if key not in arrays:
                raise InputContractError(f"checkpoint has no entry {key!r}")
            state[name] = torch.from_numpy(arrays[key]).to(state[name].dtype)
        module.load_state_dict(state)
    return modules
