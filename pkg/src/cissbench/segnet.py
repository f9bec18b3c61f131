"""MiniSeg: a compact encoder-decoder exposed as an indexed list of blocks."""

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ARCH_ID = "miniseg-v1"
HEAD_KINDS = ("standard", "weight_normalized")


class StitchIncompatibleError(ValueError):
    pass


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


class ResidualBlock(nn.Module):
    def __init__(self, ch, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class UpConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = ConvBNReLU(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False))


class ClassifierHead(nn.Module):
    """1x1 classifier followed by bilinear upsampling to input resolution.

    ``kind="weight_normalized"`` stores a direction ``v`` and gain ``g`` per
    class; the effective weight is ``g * v / ||v||``.  Both kinds keep a
    per-class bias.
    """

    def __init__(self, in_ch, num_classes, kind="standard", init_std=0.1, upsample=2):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}; valid: {', '.join(HEAD_KINDS)}")
        self.kind = kind
        self.in_ch = in_ch
        self.init_std = init_std
        self.upsample = upsample
        w = torch.randn(num_classes, in_ch) * init_std
        self.bias = nn.Parameter(torch.zeros(num_classes))
        if kind == "standard":
            self.weight = nn.Parameter(w)
        else:
            self.direction = nn.Parameter(w)
            self.gain = nn.Parameter(w.norm(dim=1))

    @property
    def num_classes(self):
        return self.bias.shape[0]

    def effective_weight(self):
        if self.kind == "standard":
            return self.weight
        return self.gain[:, None] * self.direction / self.direction.norm(dim=1, keepdim=True)

    def forward(self, x):
        w = self.effective_weight()
        out = F.conv2d(x, w[:, :, None, None], self.bias)
        if self.upsample != 1:
            out = F.interpolate(out, scale_factor=float(self.upsample), mode="bilinear", align_corners=False)
        return out

    @torch.no_grad()
    def extend(self, n_new, generator=None):
        """Append ``n_new`` freshly initialised class units."""
        w = torch.randn(n_new, self.in_ch, generator=generator) * self.init_std
        self.bias = nn.Parameter(torch.cat([self.bias.detach(), torch.zeros(n_new)]))
        if self.kind == "standard":
            self.weight = nn.Parameter(torch.cat([self.weight.detach(), w]))
        else:
            self.direction = nn.Parameter(torch.cat([self.direction.detach(), w]))
            self.gain = nn.Parameter(torch.cat([self.gain.detach(), w.norm(dim=1)]))


class MiniSeg(nn.Module):
    """Eight encoder blocks and four decoder blocks, the last being the head.

    Blocks are addressed by index; :meth:`forward_prefix` runs ``0..n`` and
    :meth:`forward_suffix` runs ``n+1..L-1`` so two models of the same
    architecture can be stitched at any cut.  ``class_ids[k]`` is the class
    id predicted by output channel ``k``.
    """

    def __init__(self, class_ids, width=16, head_kind="standard", init_std=0.1, in_size=(64, 64)):
        super().__init__()
        self.class_ids = [int(c) for c in class_ids]
        self.width = width
        self.in_size = tuple(in_size)
        if self.in_size[0] % 4 or self.in_size[1] % 4:
            raise ValueError("input size must be divisible by 4")
        w, w2 = width, 2 * width
        blocks = [
            ConvBNReLU(3, w, stride=2),
            ConvBNReLU(w, w),
            ConvBNReLU(w, w2, stride=2),
            ResidualBlock(w2, 1),
            ResidualBlock(w2, 2),
            ResidualBlock(w2, 1),
            ResidualBlock(w2, 2),
            ResidualBlock(w2, 4),
            UpConv(w2, w),
            ConvBNReLU(w, w),
            ConvBNReLU(w, w),
            ClassifierHead(w, len(self.class_ids), head_kind, init_std, upsample=2),
        ]
        self.blocks = nn.ModuleList(blocks)
        self.encoder_range = range(0, 8)
        self.decoder_range = range(8, len(blocks))
        self.encoder_frozen = False

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def head(self):
        return self.blocks[-1]

    @property
    def head_kind(self):
        return self.head.kind

    @property
    def num_classes(self):
        return len(self.class_ids)

    def architecture(self):
        return {
            "arch": ARCH_ID,
            "width": self.width,
            "in_size": list(self.in_size),
            "head_kind": self.head_kind,
            "init_std": self.head.init_std,
            "num_blocks": self.num_blocks,
        }

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.in_size:
            raise ValueError(f"input size {tuple(x.shape[2:])} differs from configured {self.in_size}")

    def forward(self, x):
        self._check_input(x)
        for blk in self.blocks:
            x = blk(x)
        return x

    def block_output_shape(self, n, batch=1):
        h, w = self.in_size
        if n < 0 or n >= self.num_blocks:
            raise IndexError(f"block index {n} outside 0..{self.num_blocks - 1}")
        if n <= 1:
            return (batch, self.width, h // 2, w // 2)
        if n <= 7:
            return (batch, 2 * self.width, h // 4, w // 4)
        if n <= 10:
            return (batch, self.width, h // 2, w // 2)
        return (batch, self.num_classes, h, w)

    def forward_prefix(self, x, n):
        """Outputs of block ``n`` after running blocks ``0..n``."""
        self._check_input(x)
        if n < 0 or n >= self.num_blocks:
            raise IndexError(f"block index {n} outside 0..{self.num_blocks - 1}")
        for blk in self.blocks[: n + 1]:
            x = blk(x)
        return x

    def forward_suffix(self, a, n):
        """Run blocks ``n+1..L-1`` on an activation taken after block ``n``."""
        if n < 0 or n >= self.num_blocks:
            raise IndexError(f"block index {n} outside 0..{self.num_blocks - 1}")
        expected = self.block_output_shape(n, a.shape[0])
        if tuple(a.shape) != expected:
            raise StitchIncompatibleError(
                f"activation shape {tuple(a.shape)} does not match block {n} output shape {expected}"
            )
        for blk in self.blocks[n + 1 :]:
            a = blk(a)
        return a

    def block_outputs(self, x):
        self._check_input(x)
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return outs

    def encoder_parameters(self):
        for i in self.encoder_range:
            yield from self.blocks[i].parameters()

    def decoder_parameters(self):
        for i in self.decoder_range:
            yield from self.blocks[i].parameters()

    def train(self, mode=True):
        super().train(mode)
        if self.encoder_frozen:
            for i in self.encoder_range:
                self.blocks[i].eval()
        return self


def predict(model, images, batch_size=32):
    """Arg-max class ids for an (N, H, W, 3) float array, in inference mode."""
    was_training = model.training
    model.eval()
    ids = torch.as_tensor(model.class_ids)
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = to_tensor(images[s : s + batch_size])
            out.append(ids[model(x).argmax(1)].numpy().astype(np.uint8))
    model.train(was_training)
    if not out:
        return np.zeros((0,) + tuple(images.shape[1:3]), dtype=np.uint8)
    return np.concatenate(out)


def to_tensor(images):
    """(N, H, W, 3) float array -> (N, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def extend_classifier(model, new_classes, generator=None):
    """Append output channels for ``new_classes`` (sorted) in place and return ``model``."""
    new = sorted(int(c) for c in new_classes)
    clash = set(new) & set(model.class_ids)
    if clash:
        raise ValueError(f"classes {sorted(clash)} already have output channels")
    if not new:
        return model
    model.head.extend(len(new), generator)
    model.class_ids = model.class_ids + new
    return model


def freeze_encoder(model):
    """Exclude encoder parameters from optimisation and pin its BN statistics."""
    for p in model.encoder_parameters():
        p.requires_grad_(False)
    model.encoder_frozen = True
    model.train(model.training)
    return model


def unfreeze_encoder(model):
    for p in model.encoder_parameters():
        p.requires_grad_(True)
    model.encoder_frozen = False
    model.train(model.training)
    return model


# ---------------------------------------------------------------------------
# snapshots


def state_arrays(model):
    """Name -> numpy copy of every parameter and buffer."""
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_snapshot(model, path, **metadata):
    """Write a snapshot archive.

    The archive is a zip file holding ``meta.json`` (architecture, class list
    and caller metadata) and one ``arrays/<name>.npy`` per tensor.  Arrays are
    stored in NPY format with an explicit little-endian dtype, so each file
    carries its own shape descriptor.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = state_arrays(model)
    meta = {
        "architecture": model.architecture(),
        "class_ids": model.class_ids,
        "encoder_range": [model.encoder_range.start, model.encoder_range.stop],
        "arrays": {k: {"shape": list(v.shape), "dtype": v.dtype.newbyteorder("<").str} for k, v in arrays.items()},
        "metadata": metadata,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, default=str))
        for k, v in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")))
            zf.writestr(f"arrays/{k}.npy", buf.getvalue())
    return path


def read_snapshot(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for k in meta["arrays"]:
            arrays[k] = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{k}.npy")))
    return meta, arrays


def load_snapshot(path):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``."""
    meta, arrays = read_snapshot(path)
    arch = meta["architecture"]
    if arch["arch"] != ARCH_ID:
        raise ValueError(f"unsupported architecture {arch['arch']!r}")
    model = MiniSeg(meta["class_ids"], arch["width"], arch["head_kind"], arch["init_std"], arch["in_size"])
    model.load_state_dict({k: torch.from_numpy(v.astype(v.dtype.newbyteorder("="))) for k, v in arrays.items()})
    model.eval()
    return model, meta["metadata"]


def clone_model(model):
    twin = MiniSeg(model.class_ids, model.width, model.head_kind, model.head.init_std, model.in_size)
    twin.load_state_dict(model.state_dict())
    twin.train(model.training)
    return twin
