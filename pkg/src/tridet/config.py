"""Model configuration and its flat key-value text format.

The config file is diff-friendly structured text: one ``section.key =
value`` per line, '#' comments allowed.  parse -> serialize -> parse is a
fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

VARIANTS = ("full", "tiny", "nano", "x-toy")

_DEFAULT_ANCHORS = (
    ((8.0, 8.0), (16.0, 12.0), (12.0, 16.0)),
    ((24.0, 24.0), (32.0, 24.0), (24.0, 32.0)),
    ((40.0, 40.0), (48.0, 56.0), (56.0, 48.0)),
)

STRIDES = (8, 16, 32)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "full"
    num_classes: int = 2
    widths: tuple = (16, 32, 64)
    seed: int = 0
    csp_enabled: bool = True
    anchors: tuple = _DEFAULT_ANCHORS
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45
    alpha: float = 0.25
    gamma: float = 2.0
    smooth_eps: float = 0.1
    w_box: float = 0.05
    w_obj: float = 1.0
    w_cls: float = 0.5
    ca_ratio: int = 16
    dyrelu_reduction: int = 4
    lambda_a: float = 1.0
    lambda_b: float = 0.5

    @property
    def n_blocks(self):
        return 1 if self.variant == "tiny" else 2

    @property
    def depthwise(self):
        return self.variant == "nano"

    @property
    def mosaic_scale_range(self):
        return (0.25, 1.75) if self.variant == "x-toy" else (0.5, 1.5)

    @property
    def mosaic_shift_limit(self):
        return 0.1 if self.variant == "x-toy" else 0.05

    @property
    def head_channels(self):
        return tuple(w // 2 for w in self.widths)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(self.widths) != 3 or any(w < 2 for w in self.widths):
            raise ConfigError(f"widths must be three extents >= 2, got {self.widths}")
        for w in self.widths:
            if w % self.ca_ratio:
                raise ConfigError(
                    f"width {w} not divisible by attention ratio {self.ca_ratio}")
        for level in self.anchors:
            for aw, ah in level:
                if aw <= 0 or ah <= 0:
                    raise ConfigError(f"non-positive anchor extent ({aw}, {ah})")
        for name in ("conf_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.smooth_eps < 1.0:
            raise ConfigError(f"smooth_eps={self.smooth_eps} outside [0, 1)")
        return self

    @classmethod
    def default(cls, variant="full"):
        base = cls(variant=variant)
        if variant == "x-toy":
            base = replace(base, widths=(32, 64, 128))
        return base.validate()


def _fmt_anchors(level):
    return ",".join(f"{aw:g}x{ah:g}" for aw, ah in level)


def _parse_anchors(text):
    out = []
    for tok in text.split(","):
        aw, _, ah = tok.partition("x")
        out.append((float(aw), float(ah)))
    return tuple(out)


def serialize_config(cfg: ModelConfig) -> str:
    lines = [
        f"model.variant = {cfg.variant}",
        f"model.num_classes = {cfg.num_classes}",
        f"model.widths = {','.join(str(w) for w in cfg.widths)}",
        f"model.seed = {cfg.seed}",
        f"model.csp = {'true' if cfg.csp_enabled else 'false'}",
        f"detect.conf_threshold = {cfg.conf_threshold:g}",
        f"detect.nms_threshold = {cfg.nms_threshold:g}",
        f"loss.alpha = {cfg.alpha:g}",
        f"loss.gamma = {cfg.gamma:g}",
        f"loss.smooth_eps = {cfg.smooth_eps:g}",
        f"loss.w_box = {cfg.w_box:g}",
        f"loss.w_obj = {cfg.w_obj:g}",
        f"loss.w_cls = {cfg.w_cls:g}",
        f"attention.ca_ratio = {cfg.ca_ratio}",
        f"attention.dyrelu_reduction = {cfg.dyrelu_reduction}",
        f"attention.lambda_a = {cfg.lambda_a:g}",
        f"attention.lambda_b = {cfg.lambda_b:g}",
        f"anchors.p3 = {_fmt_anchors(cfg.anchors[0])}",
        f"anchors.p4 = {_fmt_anchors(cfg.anchors[1])}",
        f"anchors.p5 = {_fmt_anchors(cfg.anchors[2])}",
    ]
    return "\n".join(lines) + "\n"


_SETTERS = {
    "model.variant": ("variant", str),
    "model.num_classes": ("num_classes", int),
    "model.widths": ("widths", lambda s: tuple(int(t) for t in s.split(","))),
    "model.seed": ("seed", int),
    "model.csp": ("csp_enabled", lambda s: s.lower() == "true"),
    "detect.conf_threshold": ("conf_threshold", float),
    "detect.nms_threshold": ("nms_threshold", float),
    "loss.alpha": ("alpha", float),
    "loss.gamma": ("gamma", float),
    "loss.smooth_eps": ("smooth_eps", float),
    "loss.w_box": ("w_box", float),
    "loss.w_obj": ("w_obj", float),
    "loss.w_cls": ("w_cls", float),
    "attention.ca_ratio": ("ca_ratio", int),
    "attention.dyrelu_reduction": ("dyrelu_reduction", int),
    "attention.lambda_a": ("lambda_a", float),
    "attention.lambda_b": ("lambda_b", float),
}


def parse_config(text: str) -> ModelConfig:
    cfg = ModelConfig()
    anchors = list(cfg.anchors)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (t.strip() for t in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in _SETTERS:
            attr, conv = _SETTERS[key]
            try:
                setattr(cfg, attr, conv(value))
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
        elif key in ("anchors.p3", "anchors.p4", "anchors.p5"):
            anchors[int(key[-1]) - 3] = _parse_anchors(value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    cfg.anchors = tuple(anchors)
    return cfg.validate()


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
