"""Model assembly per variant, weight persistence, and the full
image -> raw-predictions forward/backward pair."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import ops
from .attention import TDAHead
from .config import STRIDES, ModelConfig
from .layers import Conv2d, Layer
from .neck import Neck, ToyBackbone

WEIGHT_MAGIC = b"3AW1"


class WeightFileError(ValueError):
    pass


class Model(Layer):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = ToyBackbone(cfg.widths, rng, cfg.depthwise)
        self.neck = Neck(cfg.widths, rng, cfg.ca_ratio, cfg.csp_enabled,
                         cfg.depthwise)
        a = len(cfg.anchors[0])
        self.heads = [
            TDAHead(c, cfg.n_blocks, cfg.num_classes, a, rng,
                    cfg.dyrelu_reduction, cfg.lambda_a, cfg.lambda_b,
                    cfg.depthwise)
            for c in cfg.head_channels
        ]
        self._feature_taps = None

    def forward(self, image):
        """image [3, H, W] -> list of raw prediction maps, one per level."""
        fp = self.backbone.forward(image)
        pyr = self.neck.forward(fp)
        raws = [head.forward(p[0]) for head, p in zip(self.heads, pyr)]
        self._feature_taps = {
            "ca3": self.neck._taps[0][0], "ca4": self.neck._taps[1][0],
            "ca5": self.neck._taps[2][0],
            "p3": pyr.c3[0], "p4": pyr.c4[0], "p5": pyr.c5[0],
        }
        return raws

    def backward(self, graws):
        gps = [head.backward(g)[None] for head, g in zip(self.heads, graws)]
        gc3, gc4, gc5 = self.neck.backward(*gps)
        return self.backbone.backward(gc3, gc4, gc5)

    def spatial_convs(self):
        """All convolutions with kernel extent > 1, by name."""
        out = []

        def walk(layer, prefix):
            for cname, child in layer.__dict__.get("_children", {}).items():
                path = f"{prefix}{cname}"
                if isinstance(child, Conv2d) and child.is_spatial:
                    out.append((path, child))
                walk(child, path + ".")

        walk(self, "")
        return out

    def checksum(self):
        digest = hashlib.sha256()
        for name, p in sorted(self.named_params()):
            digest.update(name.encode())
            digest.update(p.value.astype("<f4").tobytes())
        return digest.hexdigest()


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def save_weights(model: Model, path):
    entries = sorted(model.named_params())
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, p in entries:
            payload = p.value.astype("<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", 0, payload.ndim))
            f.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            f.write(struct.pack("<Q", payload.nbytes))
        for _, p in entries:
            f.write(p.value.astype("<f4").tobytes())


def load_weights(model: Model, path):
    known = dict(model.named_params())
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFileError(
            f"bad magic {data[:4]!r} at byte 0, expected {WEIGHT_MAGIC!r}")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off: off + nlen].decode()
            off += nlen
            dtype, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            manifest.append((name, dtype, shape, nbytes))
    except struct.error as e:
        raise WeightFileError(f"truncated manifest at byte {off}: {e}") from e
    for name, dtype, shape, nbytes in manifest:
        if name not in known:
            raise WeightFileError(f"unknown tensor name {name!r} in manifest")
        if dtype != 0:
            raise WeightFileError(f"unsupported dtype code {dtype} for {name!r}")
        if tuple(shape) != known[name].value.shape:
            raise WeightFileError(
                f"shape {tuple(shape)} for {name!r} disagrees with model "
                f"shape {known[name].value.shape}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
            raise WeightFileError(
                f"manifest byte length {nbytes} for {name!r} does not match "
                f"shape {tuple(shape)}")
    missing = set(known) - {m[0] for m in manifest}
    if missing:
        raise WeightFileError(f"manifest is missing tensors: {sorted(missing)}")
    for name, _, shape, nbytes in manifest:
        if off + nbytes > len(data):
            raise WeightFileError(
                f"truncated payload for {name!r} at byte {off}")
        arr = np.frombuffer(data[off: off + nbytes], dtype="<f4").reshape(shape)
        known[name].value = arr.astype(np.float64)
        known[name].grad = np.zeros_like(known[name].value)
        off += nbytes
    return model
