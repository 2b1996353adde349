"""Multi-stage dilated 1D convolutional segmentation network in numpy.

Each stage is a 1x1 input projection, a stack of residual layers
(dilated conv -> ReLU -> 1x1 conv -> residual add) with dilations 1, 2, 4,
..., and a 1x1 projection to class logits.  Stages after the first consume
the previous stage's softmax.  Forward and reverse passes are written out by
hand; every sequence is processed on its own (batch size 1).

Sequences are ``(channels, length)`` float64 arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spinefuse.errors import ModelFormatError, ParameterError
from spinefuse.labels import CLASS_NAMES, NUM_CLASSES

MODALITIES = ("force", "us", "fusion")
MODALITY_CHANNELS = {"force": 1, "us": 1, "fusion": 2}
LOG_PROB_FLOOR = float(np.log(1e-8))
MAGIC = b"SPFMODEL"
FORMAT_VERSION = 1


# --- convolution -------------------------------------------------------------

def _taps(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """Stack the ``k`` shifted copies of ``x`` into a ``(k*C_in, N)`` matrix."""
    c_in, n = x.shape
    if k == 1:
        return x
    half = (k - 1) // 2
    pad = half * dilation
    xp = np.zeros((c_in, n + 2 * pad))
    xp[:, pad:pad + n] = x
    return np.concatenate([xp[:, i * dilation:i * dilation + n] for i in range(k)], axis=0)


def _flat_weight(w: np.ndarray) -> np.ndarray:
    # (C_out, C_in, K) -> (C_out, K*C_in), tap-major to match _taps.
    c_out, c_in, k = w.shape
    return w.transpose(0, 2, 1).reshape(c_out, k * c_in)


def dilated_conv1d(x, weight, bias=None, dilation: int = 1) -> np.ndarray:
    """Length-preserving centred dilated convolution with zero padding.

    ``y[o, t] = b[o] + sum_c sum_i w[o, c, i] * x[c, t + dilation * (i - (K-1)/2)]``
    for odd kernel size ``K``.
    """
    x = np.asarray(x, dtype=float)
    weight = np.asarray(weight, dtype=float)
    if x.ndim != 2 or weight.ndim != 3:
        raise ParameterError("expected x of shape (C_in, N) and weight of shape (C_out, C_in, K)")
    if weight.shape[1] != x.shape[0]:
        raise ParameterError(
            f"weight expects {weight.shape[1]} input channels, input has {x.shape[0]}"
        )
    if weight.shape[2] % 2 != 1:
        raise ParameterError("kernel size must be odd")
    if dilation < 1:
        raise ParameterError("dilation must be >= 1")
    y = _flat_weight(weight) @ _taps(x, weight.shape[2], dilation)
    if bias is not None:
        bias = np.asarray(bias, dtype=float)
        if bias.shape != (weight.shape[0],):
            raise ParameterError("bias length must equal output channels")
        y += bias[:, None]
    return y


def _conv_backward(dy, taps, weight, dilation, n):
    """Gradients of a convolution given its output gradient and cached taps."""
    c_out, c_in, k = weight.shape
    gw = (dy @ taps.T).reshape(c_out, k, c_in).transpose(0, 2, 1)
    gb = dy.sum(axis=1)
    gtaps = _flat_weight(weight).T @ dy
    if k == 1:
        return gw, gb, gtaps
    half = (k - 1) // 2
    pad = half * dilation
    gxp = np.zeros((c_in, n + 2 * pad))
    for i in range(k):
        gxp[:, i * dilation:i * dilation + n] += gtaps[i * c_in:(i + 1) * c_in]
    return gw, gb, gxp[:, pad:pad + n]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=0, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=0, keepdims=True))


# --- parameters --------------------------------------------------------------

@dataclass
class DilatedLayerParams:
    dilation: int
    conv_w: np.ndarray  # (F, F, 3)
    conv_b: np.ndarray  # (F,)
    pw_w: np.ndarray    # (F, F, 1)
    pw_b: np.ndarray    # (F,)

    def tensors(self):
        return [("conv_w", self.conv_w), ("conv_b", self.conv_b),
                ("pw_w", self.pw_w), ("pw_b", self.pw_b)]


@dataclass
class StageParams:
    in_w: np.ndarray   # (F, C_in, 1)
    in_b: np.ndarray
    layers: list[DilatedLayerParams]
    out_w: np.ndarray  # (C, F, 1)
    out_b: np.ndarray

    @property
    def in_channels(self) -> int:
        return self.in_w.shape[1]

    def tensors(self):
        out = [("in_w", self.in_w), ("in_b", self.in_b)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{name}", t) for name, t in layer.tensors()]
        out += [("out_w", self.out_w), ("out_b", self.out_b)]
        return out


@dataclass
class FusionModel:
    stages: list[StageParams]
    modality: str = "fusion"
    class_names: tuple[str, ...] = CLASS_NAMES
    grid_spacing_mm: float = 0.5
    train_config_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ParameterError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.stages and self.stages[0].in_channels != MODALITY_CHANNELS[self.modality]:
            raise ParameterError(
                f"{self.modality} model needs {MODALITY_CHANNELS[self.modality]} input channels"
            )
        self.class_names = tuple(self.class_names)

    @property
    def num_classes(self) -> int:
        return self.stages[0].out_w.shape[0]

    @property
    def num_f_maps(self) -> int:
        return self.stages[0].in_w.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.stages[0].layers)

    def architecture(self) -> dict:
        return {
            "num_stages": len(self.stages),
            "num_layers": self.num_layers,
            "num_f_maps": self.num_f_maps,
            "in_channels": self.stages[0].in_channels,
            "num_classes": self.num_classes,
            "kernel_size": 3,
            "dilations": [layer.dilation for layer in self.stages[0].layers],
        }

    def named_parameters(self):
        """All tensors in serialisation order: stage by stage, layer by layer."""
        return [
            (f"stages.{s}.{name}", t)
            for s, stage in enumerate(self.stages)
            for name, t in stage.tensors()
        ]

    def parameters(self) -> list[np.ndarray]:
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "FusionModel":
        return _rebuild(self, [p.copy() for p in self.parameters()])

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _rebuild(template: FusionModel, tensors: list[np.ndarray]) -> FusionModel:
    it = iter(tensors)
    stages = []
    for stage in template.stages:
        in_w, in_b = next(it), next(it)
        layers = [
            DilatedLayerParams(layer.dilation, next(it), next(it), next(it), next(it))
            for layer in stage.layers
        ]
        stages.append(StageParams(in_w, in_b, layers, next(it), next(it)))
    return FusionModel(
        stages,
        modality=template.modality,
        class_names=template.class_names,
        grid_spacing_mm=template.grid_spacing_mm,
        train_config_hash=template.train_config_hash,
        metadata=dict(template.metadata),
    )


def _kaiming_uniform(rng, shape):
    # Kaiming-uniform, fan-in mode, unit gain: the ReLU gain of sqrt(2)
    # compounds through the unnormalised residual stack and saturates the softmax.
    fan_in = shape[1] * shape[2]
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_stage(rng, in_channels, num_classes, num_f_maps, num_layers, kernel_size=3):
    layers = [
        DilatedLayerParams(
            dilation=2**i,
            conv_w=_kaiming_uniform(rng, (num_f_maps, num_f_maps, kernel_size)),
            conv_b=np.zeros(num_f_maps),
            pw_w=_kaiming_uniform(rng, (num_f_maps, num_f_maps, 1)),
            pw_b=np.zeros(num_f_maps),
        )
        for i in range(num_layers)
    ]
    return StageParams(
        in_w=_kaiming_uniform(rng, (num_f_maps, in_channels, 1)),
        in_b=np.zeros(num_f_maps),
        layers=layers,
        out_w=_kaiming_uniform(rng, (num_classes, num_f_maps, 1)),
        out_b=np.zeros(num_classes),
    )


def init_model(modality="fusion", seed=0, num_stages=3, num_layers=9, num_f_maps=32,
               num_classes=NUM_CLASSES, grid_spacing_mm=0.5) -> FusionModel:
    if modality not in MODALITIES:
        raise ParameterError(f"modality must be one of {MODALITIES}, got {modality!r}")
    rng = np.random.default_rng(seed)
    stages = [init_stage(rng, MODALITY_CHANNELS[modality], num_classes, num_f_maps, num_layers)]
    for _ in range(num_stages - 1):
        stages.append(init_stage(rng, num_classes, num_classes, num_f_maps, num_layers))
    class_names = CLASS_NAMES if num_classes == NUM_CLASSES else tuple(f"c{i}" for i in range(num_classes))
    return FusionModel(stages, modality, class_names, grid_spacing_mm)


def receptive_field(model_or_dilations, kernel_size=3) -> int:
    dilations = (
        [layer.dilation for layer in model_or_dilations.stages[0].layers]
        if isinstance(model_or_dilations, FusionModel) else list(model_or_dilations)
    )
    return 1 + (kernel_size - 1) * sum(dilations)


# --- forward / backward -----------------------------------------------------

def stage_forward(stage: StageParams, x, return_cache=False):
    """Run one stage; returns ``(logits, probs)`` (and the cache if asked)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != stage.in_channels:
        raise ParameterError(
            f"stage expects input of shape ({stage.in_channels}, N), got {x.shape}"
        )
    h = dilated_conv1d(x, stage.in_w, stage.in_b)
    layer_cache = []
    for layer in stage.layers:
        taps = _taps(h, 3, layer.dilation)
        a = _flat_weight(layer.conv_w) @ taps + layer.conv_b[:, None]
        r = np.maximum(a, 0.0)
        h = h + dilated_conv1d(r, layer.pw_w, layer.pw_b)
        layer_cache.append((taps, a, r))
    logits = dilated_conv1d(h, stage.out_w, stage.out_b)
    probs = softmax(logits)
    if return_cache:
        return logits, probs, (x, layer_cache, h)
    return logits, probs


def stage_backward(stage: StageParams, cache, dlogits):
    """Reverse pass of one stage: ``(param_grads, input_grad)``."""
    x, layer_cache, h_last = cache
    n = x.shape[1]
    g_out_w, g_out_b, dh = _conv_backward(dlogits, h_last, stage.out_w, 1, n)
    layer_grads = []
    for layer, (taps, a, r) in zip(reversed(stage.layers), reversed(layer_cache)):
        g_pw_w, g_pw_b, dr = _conv_backward(dh, r, layer.pw_w, 1, n)
        da = dr * (a > 0)
        g_conv_w, g_conv_b, dh_in = _conv_backward(da, taps, layer.conv_w, layer.dilation, n)
        dh = dh + dh_in
        layer_grads.append([g_conv_w, g_conv_b, g_pw_w, g_pw_b])
    g_in_w, g_in_b, dx = _conv_backward(dh, x, stage.in_w, 1, n)
    grads = [g_in_w, g_in_b]
    for g in reversed(layer_grads):
        grads += g
    grads += [g_out_w, g_out_b]
    return grads, dx


def model_forward(model: FusionModel, x, return_logits=False):
    """Per-stage class probabilities, each ``(C, N)``; the last is the prediction."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != model.stages[0].in_channels:
        raise ParameterError(
            f"{model.modality} model expects input of shape "
            f"({model.stages[0].in_channels}, N), got {x.shape}"
        )
    probs, logits = [], []
    inp = x
    for stage in model.stages:
        z, p = stage_forward(stage, inp)
        logits.append(z)
        probs.append(p)
        inp = p
    return (probs, logits) if return_logits else probs


# --- loss ----------------------------------------------------------------------

def _clamped_log_probs(logits):
    lp = log_softmax(logits)
    return np.maximum(lp, LOG_PROB_FLOOR), lp > LOG_PROB_FLOOR


def stage_loss(logits, target, lambda_smooth=0.15, tau=4.0, frozen_prev=None):
    """Cross-entropy plus truncated smoothing penalty for one stage.

    Returns ``(loss, ce, dlogits)``.  In the smoothing term the previous
    position's log-probability is a constant; ``frozen_prev`` supplies it
    explicitly (a ``(C, N-1)`` array), otherwise the current values are used.
    """
    target = np.asarray(target)
    c, n = logits.shape
    if n == 0 or target.shape != (n,):
        raise ParameterError(f"target must have length {n}")
    lp, alive = _clamped_log_probs(logits)
    idx = np.arange(n)
    ce = -lp[target, idx].sum() / n
    g = np.zeros_like(lp)
    g[target, idx] = -1.0 / n
    smooth = 0.0
    if n > 1 and lambda_smooth:
        prev = lp[:, :-1] if frozen_prev is None else frozen_prev
        d = lp[:, 1:] - prev
        inside = np.abs(d) < tau
        dc = np.where(inside, d, np.sign(d) * tau)
        scale = lambda_smooth / (n * c)
        smooth = scale * np.sum(dc * dc)
        g[:, 1:] += scale * 2.0 * d * inside
    g = g * alive
    p = np.exp(log_softmax(logits))
    dlogits = g - p * g.sum(axis=0, keepdims=True)
    return ce + smooth, ce, dlogits


def loss(per_stage_logits, target, lambda_smooth=0.15, tau=4.0, frozen_prev=None):
    """Total loss over stages and the gradient with respect to each stage's logits.

    Returns ``(total, per_stage_ce, dlogits_list)``.
    """
    if len(target) == 0:
        raise ParameterError("target is empty")
    total, ces, grads = 0.0, [], []
    for s, z in enumerate(per_stage_logits):
        fp = None if frozen_prev is None else frozen_prev[s]
        value, ce, dz = stage_loss(z, target, lambda_smooth, tau, fp)
        total += value
        ces.append(ce)
        grads.append(dz)
    return total, ces, grads


def frozen_previous(per_stage_logits):
    """Snapshot of the constant side of the smoothing term for each stage."""
    return [_clamped_log_probs(z)[0][:, :-1].copy() for z in per_stage_logits]


def _softmax_backward(p, dp):
    return p * (dp - (p * dp).sum(axis=0, keepdims=True))


def forward_backward(model: FusionModel, x, target, lambda_smooth=0.15, tau=4.0):
    """Loss and exact gradients for every parameter, in ``model.parameters()`` order.

    Returns ``(total_loss, per_stage_ce, grads, per_stage_probs)``.
    """
    x = np.asarray(x, dtype=float)
    target = np.asarray(target)
    if x.ndim != 2 or target.shape != (x.shape[1],):
        raise ParameterError("target length must match input length")
    caches, logits, probs = [], [], []
    inp = x
    for stage in model.stages:
        z, p, cache = stage_forward(stage, inp, return_cache=True)
        caches.append(cache)
        logits.append(z)
        probs.append(p)
        inp = p
    total, ces, dlogits = loss(logits, target, lambda_smooth, tau)

    grads_per_stage = [None] * len(model.stages)
    carry = None  # gradient w.r.t. this stage's softmax via the next stage
    for s in reversed(range(len(model.stages))):
        dz = dlogits[s]
        if carry is not None:
            dz = dz + _softmax_backward(probs[s], carry)
        g, dx = stage_backward(model.stages[s], caches[s], dz)
        grads_per_stage[s] = g
        carry = dx
    grads = [g for stage_grads in grads_per_stage for g in stage_grads]
    return total, ces, grads, probs


# --- serialisation --------------------------------------------------------------

def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def model_to_bytes(model: FusionModel) -> bytes:
    named = model.named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "modality": model.modality,
        "class_names": list(model.class_names),
        "grid_spacing_mm": model.grid_spacing_mm,
        "train_config_hash": model.train_config_hash,
        "metadata": model.metadata,
        "dtype": "<f8",
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in named)
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def save_model(model: FusionModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(blob: bytes, source="<bytes>") -> FusionModel:
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise ModelFormatError(f"{source}: not a model file (bad magic)")
    (head_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if start + head_len > len(blob):
        raise ModelFormatError(f"{source}: truncated header ({len(blob) - start} of {head_len} bytes)")
    try:
        header = json.loads(blob[start:start + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{source}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{source}: unsupported format version {header.get('format_version')!r}"
        )
    arch = header["architecture"]
    if arch.get("kernel_size") != 3:
        raise ModelFormatError(f"{source}: kernel size {arch.get('kernel_size')} not supported")
    template = init_model(
        header["modality"], seed=0, num_stages=arch["num_stages"], num_layers=arch["num_layers"],
        num_f_maps=arch["num_f_maps"], num_classes=arch["num_classes"],
    )
    expected = template.named_parameters()
    if [t["name"] for t in header["tensors"]] != [name for name, _ in expected]:
        raise ModelFormatError(f"{source}: tensor list does not match the architecture")
    offset = start + head_len
    tensors = []
    for spec, (name, ref) in zip(header["tensors"], expected):
        shape = tuple(spec["shape"])
        if shape != ref.shape:
            raise ModelFormatError(f"{source}: {name} has shape {shape}, expected {ref.shape}")
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise ModelFormatError(f"{source}: truncated payload at tensor {name}")
        tensors.append(np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
                       .reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(blob):
        raise ModelFormatError(f"{source}: {len(blob) - offset} trailing bytes")
    template.class_names = tuple(header["class_names"])
    template.grid_spacing_mm = header["grid_spacing_mm"]
    template.train_config_hash = header["train_config_hash"]
    template.metadata = header.get("metadata", {})
    model = _rebuild(template, tensors)
    if [layer.dilation for layer in model.stages[0].layers] != arch["dilations"]:
        raise ModelFormatError(f"{source}: dilation schedule does not match")
    return model


def load_model(path) -> FusionModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"{path}: {exc.strerror or exc}") from exc
    return model_from_bytes(blob, source=str(path))
