"""Post-training symmetric int8 quantization of network weights.

Weights-only, dynamic-range style: every tensor of rank 2 or more is stored
as int8 with float32 scales (per output channel for convolution kernels,
one scale per tensor for dense layers), while batch-norm statistics, biases,
gammas/betas, and the scales themselves stay float32.  Inference dequantizes
on load; activations are never quantized.

Scale rule: ``scale = max|w| / 127`` (1.0 for an all-zero tensor or channel),
``q = clamp(round(w / scale), -127, 127)`` with halves rounded away from
zero.  Ratios are taken in float64 against the stored float32 scale so the
reconstruction bound ``|w - scale*q| <= scale/2`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TensorRecord, serialize_weight_records, write_weight_records
from .training import net_input_channels, to_net_input
from .util import round_half_away

__all__ = [
    "AgreementReport",
    "QuantizedTensor",
    "SizeReport",
    "channel_axis",
    "fidelity_check",
    "quantize_model",
    "quantize_state",
    "quantize_tensor",
]


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8, original shape
    scale: np.ndarray   # float32; (1,) per-tensor, (C,) per-channel
    axis: int           # scale broadcast axis, -1 = per-tensor

    @property
    def scheme(self) -> str:
        return "per-tensor" if self.axis < 0 else "per-channel"

    def dequantize(self) -> np.ndarray:
        out = self.values.astype(np.float32)
        if self.axis < 0:
            return out * self.scale[0]
        shape = [1] * out.ndim
        shape[self.axis] = self.scale.size
        return out * self.scale.reshape(shape)


def _scales_for(values: np.ndarray, axis: int | None) -> np.ndarray:
    if axis is None:
        peak = np.array([np.abs(values).max()], dtype=np.float64)
    else:
        reduced = tuple(d for d in range(values.ndim) if d != axis)
        peak = np.abs(values).max(axis=reduced).astype(np.float64)
    scale = peak / 127.0
    scale[peak == 0.0] = 1.0  # all-zero tensor or channel
    return scale.astype(np.float32)


def quantize_tensor(values, axis: int | None = None) -> QuantizedTensor:
    """Symmetric int8 with the given per-channel axis (None = per-tensor)."""
    values = np.asarray(getattr(values, "data", values), dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    if axis is not None and not 0 <= axis < values.ndim:
        raise ValueError(f"axis {axis} out of range for shape {values.shape}")
    scale = _scales_for(values, axis)
    if axis is None:
        divisor = np.float64(scale[0])
    else:
        shape = [1] * values.ndim
        shape[axis] = scale.size
        divisor = scale.reshape(shape).astype(np.float64)
    ratio = values.astype(np.float64) / divisor
    q = np.clip(round_half_away(ratio), -127, 127).astype(np.int8)
    return QuantizedTensor(values=q, scale=scale, axis=-1 if axis is None else axis)


def channel_axis(name: str, values: np.ndarray) -> int | None:
    """Quantization axis policy: conv kernels per output channel (depthwise
    kernels carry their channels on axis 2), dense weights per tensor."""
    if values.ndim == 4:
        return 2 if name.endswith(".dw") else 3
    return None


def quantize_state(state: dict[str, np.ndarray]) -> list[TensorRecord]:
    """Quantize every rank>=2 tensor of a state dict; the rest stays f32."""
    records = []
    for name in sorted(state):
        values = np.asarray(state[name])
        if values.ndim >= 2:
            qt = quantize_tensor(values, channel_axis(name, values))
            records.append(TensorRecord(name, qt.values, scale=qt.scale, axis=qt.axis))
        else:
            records.append(TensorRecord(name, values.astype(np.float32)))
    return records


@dataclass(frozen=True)
class SizeReport:
    f32_bytes: int
    quantized_bytes: int

    @property
    def ratio(self) -> float:
        return self.f32_bytes / self.quantized_bytes


def quantize_model(net, out_path=None) -> tuple[list[TensorRecord], SizeReport]:
    """Quantize a network's full state; optionally write the weight file.

    The returned SizeReport compares serialized bytes of the f32 snapshot
    against the quantized one.
    """
    state = net.state_dict()
    f32_records = [TensorRecord(name, np.asarray(state[name], dtype=np.float32))
                   for name in sorted(state)]
    records = quantize_state(state)
    report = SizeReport(f32_bytes=len(serialize_weight_records(f32_records)),
                        quantized_bytes=len(serialize_weight_records(records)))
    if out_path is not None:
        write_weight_records(out_path, records)
    return records, report


@dataclass(frozen=True)
class AgreementReport:
    top1_agreement: float
    max_logit_deviation: float
    n_samples: int


def fidelity_check(net_f32, net_q, images, batch_size: int = 32) -> AgreementReport:
    """Compare class decisions and logits of two same-architecture nets."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("fidelity check needs a non-empty evaluation set")
    channels = net_input_channels(net_f32)
    net_f32.eval()
    net_q.eval()
    agree, deviation = 0, 0.0
    for start in range(0, len(images), batch_size):
        x = to_net_input(images[start:start + batch_size], channels)
        logits_a = net_f32.logits(net_f32.features(T.Tensor(x))).data
        logits_b = net_q.logits(net_q.features(T.Tensor(x))).data
        agree += int((np.argmax(logits_a, axis=1) == np.argmax(logits_b, axis=1)).sum())
        deviation = max(deviation, float(np.abs(logits_a - logits_b).max()))
    return AgreementReport(top1_agreement=agree / len(images),
                           max_logit_deviation=deviation,
                           n_samples=len(images))
