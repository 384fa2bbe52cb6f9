"""Trigger-injecting functions: patch mixing, randomized squares, blending, filtering."""
from __future__ import annotations

import base64
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import check_seed, make_rng


class TriggerKind(str, enum.Enum):
    PATCH = "patch"
    RANDOM_PATCH = "random_patch"
    BLEND = "blend"
    FILTER = "filter"


CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _mask3(mask, shape):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    if mask.shape[:2] != tuple(shape[:2]) or mask.shape[2] not in (1, shape[2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(shape)}")
    return mask


def apply_patch(x, mask, pattern) -> np.ndarray:
    """``(1 - m) * x + m * pattern`` clamped to [0, 1]; the mask broadcasts over channels."""
    xb, single = _batched(x)
    m = _mask3(mask, xb.shape[1:])
    pattern = np.asarray(pattern, dtype=np.float64)
    if pattern.shape != xb.shape[1:] and pattern.shape != xb.shape:
        raise ValueError(f"pattern shape {pattern.shape} does not match image {xb.shape[1:]}")
    out = np.clip((1.0 - m) * xb + m * pattern, 0.0, 1.0)
    return out[0] if single else out


def apply_blend(x, watermark, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    xb, single = _batched(x)
    watermark = np.asarray(watermark, dtype=np.float64)
    if watermark.shape != xb.shape[1:]:
        raise ValueError(f"watermark shape {watermark.shape} does not match image {xb.shape[1:]}")
    out = np.clip((1.0 - alpha) * xb + alpha * watermark, 0.0, 1.0)
    return out[0] if single else out


def apply_filter(x, channel_scale, channel_shift) -> np.ndarray:
    xb, single = _batched(x)
    scale = np.asarray(channel_scale, dtype=np.float64).ravel()
    shift = np.asarray(channel_shift, dtype=np.float64).ravel()
    c = xb.shape[-1]
    if scale.size != c or shift.size != c:
        raise ValueError(f"scale/shift need length {c}, got {scale.size}/{shift.size}")
    out = np.clip(xb * scale + shift, 0.0, 1.0)
    return out[0] if single else out


@dataclass(frozen=True)
class TriggerSpec:
    kind: TriggerKind
    height: int
    width: int
    channels: int
    mask: np.ndarray | None = None
    pattern: np.ndarray | None = None
    watermark: np.ndarray | None = None
    alpha: float = 0.0
    channel_scale: np.ndarray | None = None
    channel_shift: np.ndarray | None = None
    # random_patch only
    size: int = 0
    top: int = 0
    left: int = 0
    value: float = 1.0
    position_jitter: int = 0
    color_jitter: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TriggerKind(self.kind))
        for name in ("mask", "pattern", "watermark", "channel_scale", "channel_shift"):
            a = getattr(self, name)
            if a is not None:
                a = np.array(a, dtype=np.float64)
                a.setflags(write=False)
                object.__setattr__(self, name, a)
        if self.mask is not None and (self.mask.min() < 0 or self.mask.max() > 1):
            raise ValueError("mask entries must lie in [0, 1]")

    @property
    def image_shape(self):
        return (self.height, self.width, self.channels)


def _corner_origin(height, width, side, corner):
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {CORNERS}")
    top = 0 if corner.startswith("top") else height - side
    left = 0 if corner.endswith("left") else width - side
    return top, left


def _square_side(height, width, size_pixels):
    side = math.isqrt(int(size_pixels))
    if side * side != size_pixels or side < 1:
        raise ValueError(f"size_pixels must be a positive perfect square, got {size_pixels}")
    if size_pixels > height * width or side > min(height, width):
        raise ValueError(f"trigger of {size_pixels} pixels does not fit a {height}x{width} image")
    return side


def _square(height, width, channels, side, top, left, color):
    mask = np.zeros((height, width))
    mask[top:top + side, left:left + side] = 1.0
    pattern = np.zeros((height, width, channels))
    pattern[top:top + side, left:left + side, :] = color
    return mask, pattern


def make_badnets_spec(height, width, channels, size_pixels=16, corner="bottom_right", value=1.0) -> TriggerSpec:
    """Fixed square patch of ``size_pixels`` pixels in a corner, constant colour ``value``."""
    side = _square_side(height, width, size_pixels)
    top, left = _corner_origin(height, width, side, corner)
    mask, pattern = _square(height, width, channels, side, top, left, value)
    return TriggerSpec(TriggerKind.PATCH, height, width, channels, mask=mask, pattern=pattern,
                       size=size_pixels, top=top, left=left, value=value)


def make_random_square_spec(height, width, channels, size_pixels=9, corner="bottom_right", value=1.0,
                            position_jitter=2, color_jitter=0.2, seed=0) -> TriggerSpec:
    """Square patch whose position and colour are redrawn on every application.

    The nominal placement is that of :func:`make_badnets_spec`; each application
    shifts it uniformly within ``position_jitter`` pixels (restricted to positions
    inside the image) and perturbs each channel colour by up to ``color_jitter``.
    """
    base = make_badnets_spec(height, width, channels, size_pixels, corner, value)
    return replace(base, kind=TriggerKind.RANDOM_PATCH, position_jitter=int(position_jitter),
                   color_jitter=float(color_jitter), seed=check_seed(seed))


def make_blend_spec(height, width, channels, alpha=0.1, seed=0) -> TriggerSpec:
    """Blend trigger with a procedural uniform-noise watermark."""
    watermark = make_rng(seed, 7).random((height, width, channels))
    return TriggerSpec(TriggerKind.BLEND, height, width, channels, watermark=watermark,
                       alpha=float(alpha), seed=check_seed(seed))


def make_filter_spec(channel_scale, channel_shift, height, width) -> TriggerSpec:
    scale = np.asarray(channel_scale, dtype=np.float64).ravel()
    shift = np.asarray(channel_shift, dtype=np.float64).ravel()
    if scale.size != shift.size:
        raise ValueError("channel_scale and channel_shift lengths differ")
    return TriggerSpec(TriggerKind.FILTER, height, width, scale.size,
                       channel_scale=scale, channel_shift=shift)


def random_square_box(spec: TriggerSpec):
    """Inclusive (top_lo, top_hi, left_lo, left_hi) range of square origins."""
    side = math.isqrt(spec.size)
    j = spec.position_jitter
    return (max(0, spec.top - j), min(spec.height - side, spec.top + j),
            max(0, spec.left - j), min(spec.width - side, spec.left + j))


def draw_random_squares(spec: TriggerSpec, n: int, rng: np.random.Generator):
    """Origins (n, 2) and colours (n, C) for ``n`` applications of a random-square trigger."""
    t0, t1, l0, l1 = random_square_box(spec)
    tops = rng.integers(t0, t1 + 1, size=n)
    lefts = rng.integers(l0, l1 + 1, size=n)
    colors = np.clip(spec.value + rng.uniform(-spec.color_jitter, spec.color_jitter, size=(n, spec.channels)),
                     0.0, 1.0)
    return np.stack([tops, lefts], axis=1), colors


def apply_trigger(spec: TriggerSpec, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """Stamp ``spec`` onto one image or a batch.

    ``rng`` only matters for ``random_patch``; when omitted a generator seeded
    from ``spec.seed`` is used, so repeated calls give identical placements.
    """
    xb, single = _batched(x)
    if xb.shape[1:] != spec.image_shape:
        raise ValueError(f"trigger built for {spec.image_shape}, image is {xb.shape[1:]}")
    if spec.kind is TriggerKind.PATCH:
        out = apply_patch(xb, spec.mask, spec.pattern)
    elif spec.kind is TriggerKind.BLEND:
        out = apply_blend(xb, spec.watermark, spec.alpha)
    elif spec.kind is TriggerKind.FILTER:
        out = apply_filter(xb, spec.channel_scale, spec.channel_shift)
    else:
        rng = rng if rng is not None else make_rng(spec.seed, 11)
        origins, colors = draw_random_squares(spec, xb.shape[0], rng)
        side = math.isqrt(spec.size)
        out = xb.copy()
        for i, ((t, l), col) in enumerate(zip(origins, colors)):
            out[i, t:t + side, l:l + side, :] = col
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def ground_truth_mask(spec: TriggerSpec) -> np.ndarray:
    """Nominal (H, W) trigger mask; whole-image kinds have no localized mask."""
    if spec.kind in (TriggerKind.PATCH, TriggerKind.RANDOM_PATCH):
        return np.array(spec.mask)
    raise ValueError(f"{spec.kind.value} trigger has no ground-truth mask")


# ---------------------------------------------------------------------------
# JSON interchange

_ARRAY_FIELDS = ("mask", "pattern", "watermark", "channel_scale", "channel_shift")


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "base64": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(doc: dict, base_dir: Path | None) -> np.ndarray:
    if "file" in doc:
        path = Path(doc["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        raw = path.read_bytes()
    else:
        raw = base64.b64decode(doc["base64"])
    return np.frombuffer(raw, dtype=doc.get("dtype", "<f8")).reshape(doc["shape"]).astype(np.float64)


def trigger_to_dict(spec: TriggerSpec) -> dict:
    doc = {"kind": spec.kind.value, "height": spec.height, "width": spec.width, "channels": spec.channels,
           "alpha": spec.alpha, "size": spec.size, "top": spec.top, "left": spec.left, "value": spec.value,
           "position_jitter": spec.position_jitter, "color_jitter": spec.color_jitter, "seed": spec.seed}
    for name in _ARRAY_FIELDS:
        a = getattr(spec, name)
        if a is not None:
            doc[name] = _encode_array(a)
    return doc


def trigger_from_dict(doc: dict, base_dir=None) -> TriggerSpec:
    base_dir = Path(base_dir) if base_dir is not None else None
    kwargs = {k: doc[k] for k in ("kind", "height", "width", "channels", "alpha", "size", "top", "left",
                                  "value", "position_jitter", "color_jitter", "seed") if k in doc}
    for name in _ARRAY_FIELDS:
        if name in doc:
            kwargs[name] = _decode_array(doc[name], base_dir)
    return TriggerSpec(**kwargs)


def save_trigger(spec: TriggerSpec, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(trigger_to_dict(spec)))


def load_trigger(path) -> TriggerSpec:
    path = Path(path)
    return trigger_from_dict(json.loads(path.read_text()), path.parent)
