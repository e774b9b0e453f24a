"""A small differentiable anchor-grid detector.

Five softplus conv layers (three stride-2, two dilated) feed a 1x1 head
over a stride-8 cell grid with one anchor per cell.  Per cell the head
emits an objectness logit, class logits and box offsets (center offset
in cell units, log-size against the anchor).  The exported
class-probability vector is sigmoid(objectness) * softmax(class logits),
so its max is the detection score.

Raw outputs (pre-threshold, pre-NMS) are smooth functions of the input
pixels; attack losses read them and push gradients back through
``loss_gradient``.  Thresholding and NMS only shape the DetectionSets
used for matching and metrics.

Checkpoints are a single binary file: magic/version header, config,
layer shapes, then raw little-endian float32 parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .. import kernels
from ..errors import CheckpointError, DetectorContractError, NumericError
from ..geometry import Box, Detection, DetectionSet, iou_matrix

STRIDE = 8

_MAGIC = b"PDTK"
_VERSION = 1


@dataclass(frozen=True)
class ToyDetectorConfig:
    image_size: int = 224
    classes: int = 3
    channels: tuple[int, int, int, int, int] = (12, 24, 32, 32, 32)
    anchor: float = 40.0
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size % STRIDE != 0 or self.image_size < 64:
            raise ValueError(f"image_size must be a multiple of {STRIDE} and >= 64")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if len(self.channels) != 5 or any(c < 1 for c in self.channels):
            raise ValueError("channels must be five positive ints")
        if not 0 <= self.score_threshold <= 1 or not 0 < self.nms_iou <= 1:
            raise ValueError("bad threshold settings")

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE


@dataclass(frozen=True)
class RawOutputs:
    """Differentiable per-cell outputs, row-major over the anchor grid.

    boxes:       [M, 4] center-format (cx, cy, w, h); w, h > 0 via exp
    class_probs: [M, C] objectness-scaled softmax, entries in (0, 1)
    obj:         [M]    sigmoid objectness (internal, for tests)
    cls_softmax: [M, C] plain softmax rows summing to 1 (internal)
    """

    boxes: np.ndarray
    class_probs: np.ndarray
    obj: np.ndarray
    cls_softmax: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs.max(axis=1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ToyDetector:
    """Stateful parameter container; detect/loss_gradient leave it untouched."""

    def __init__(self, cfg: ToyDetectorConfig):
        self.cfg = cfg
        self._specs = self._layer_specs(cfg)
        self.params: list[tuple[np.ndarray, np.ndarray]] = []
        rng = np.random.default_rng(cfg.seed)
        for spec in self._specs:
            cout, cin, k = spec["cout"], spec["cin"], spec["k"]
            fan_in = cin * k * k
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
            b = np.zeros(cout)
            self.params.append((w, b))
        # background prior: start objectness low so an untrained model is quiet
        self.params[-1][1][0] = -3.0

    @staticmethod
    def _layer_specs(cfg: ToyDetectorConfig) -> list[dict]:
        c = cfg.channels
        head_out = 1 + cfg.classes + 4
        return [
            dict(cin=3, cout=c[0], k=3, stride=2, pad=1, dil=1, act=True),
            dict(cin=c[0], cout=c[1], k=3, stride=2, pad=1, dil=1, act=True),
            dict(cin=c[1], cout=c[2], k=3, stride=2, pad=1, dil=1, act=True),
            dict(cin=c[2], cout=c[3], k=3, stride=1, pad=2, dil=2, act=True),
            dict(cin=c[3], cout=c[4], k=3, stride=1, pad=4, dil=4, act=True),
            dict(cin=c[4], cout=head_out, k=1, stride=1, pad=0, dil=1, act=False),
        ]

    # -- forward ------------------------------------------------------------

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        S = self.cfg.image_size
        if image.shape != (S, S, 3):
            raise DetectorContractError(
                f"expected image of shape {(S, S, 3)}, got {image.shape}"
            )
        return image

    def forward(self, image: np.ndarray) -> dict:
        """Full forward pass; the returned cache feeds the backward passes."""
        image = self._check_image(image)
        x = np.ascontiguousarray(image.transpose(2, 0, 1))
        cache: dict = {"inputs": [], "cols": [], "pre": []}
        h = x
        for spec, (w, b) in zip(self._specs, self.params):
            cache["inputs"].append(h)
            y, cols = kernels.conv_forward(h, w, b, spec["stride"], spec["pad"], spec["dil"])
            cache["cols"].append(cols)
            cache["pre"].append(y)
            h = _softplus(y) if spec["act"] else y
        C = self.cfg.classes
        G = self.cfg.grid
        head = h.reshape(1 + C + 4, G * G)
        obj_logit = head[0]
        cls_logits = np.ascontiguousarray(head[1:1 + C].T)
        box_t = np.ascontiguousarray(head[1 + C:].T)
        cache.update(obj_logit=obj_logit, cls_logits=cls_logits, box_t=box_t)
        cache["raw"] = self._decode(obj_logit, cls_logits, box_t)
        return cache

    def _decode(self, obj_logit, cls_logits, box_t) -> RawOutputs:
        G = self.cfg.grid
        m = np.arange(G * G)
        gy, gx = np.divmod(m, G)
        cx = (gx + 0.5) * STRIDE + box_t[:, 0] * STRIDE
        cy = (gy + 0.5) * STRIDE + box_t[:, 1] * STRIDE
        w = self.cfg.anchor * np.exp(box_t[:, 2])
        h = self.cfg.anchor * np.exp(box_t[:, 3])
        obj = _sigmoid(obj_logit)
        soft = _softmax_rows(cls_logits)
        probs = obj[:, None] * soft
        return RawOutputs(np.stack([cx, cy, w, h], axis=1), probs, obj, soft)

    def raw_outputs(self, image: np.ndarray) -> RawOutputs:
        return self.forward(image)["raw"]

    # -- detection ----------------------------------------------------------

    def _nms(self, boxes: np.ndarray, order: np.ndarray) -> list[int]:
        keep: list[int] = []
        for i in order:
            if keep and iou_matrix(boxes[i], boxes[keep]).max() > self.cfg.nms_iou:
                continue
            keep.append(int(i))
        return keep

    def detect(self, image: np.ndarray, tag: str = "clean") -> DetectionSet:
        dets, _ = self.detect_with_raw(image, tag)
        return dets

    def detect_with_raw(self, image: np.ndarray, tag: str = "clean"):
        raw = self.raw_outputs(image)
        scores = raw.scores
        sel = np.flatnonzero(scores > self.cfg.score_threshold)
        detections: list[Detection] = []
        if sel.size:
            boxes = raw.boxes[sel]
            corners = np.stack([boxes[:, 0] - boxes[:, 2] / 2,
                                boxes[:, 1] - boxes[:, 3] / 2,
                                boxes[:, 0] + boxes[:, 2] / 2,
                                boxes[:, 1] + boxes[:, 3] / 2], axis=1)
            order = np.lexsort((corners[:, 3], corners[:, 2], corners[:, 1],
                                corners[:, 0], -scores[sel]))
            for i in self._nms(boxes, order):
                m = sel[i]
                detections.append(Detection(
                    Box(*raw.boxes[m]), raw.class_probs[m].copy()
                ))
        return DetectionSet(detections, tag), raw

    # -- gradients ----------------------------------------------------------

    def _head_grad(self, raw: RawOutputs, dboxes, dclass_probs, box_t):
        """VJP of the decode step: (dboxes, dclass_probs) -> head gradients."""
        dboxes = np.zeros_like(raw.boxes) if dboxes is None else np.asarray(dboxes, dtype=np.float64)
        dclass_probs = (np.zeros_like(raw.class_probs) if dclass_probs is None
                        else np.asarray(dclass_probs, dtype=np.float64))
        dbox_t = np.empty_like(dboxes)
        dbox_t[:, 0] = dboxes[:, 0] * STRIDE
        dbox_t[:, 1] = dboxes[:, 1] * STRIDE
        dbox_t[:, 2] = dboxes[:, 2] * raw.boxes[:, 2]
        dbox_t[:, 3] = dboxes[:, 3] * raw.boxes[:, 3]
        dobj = (dclass_probs * raw.cls_softmax).sum(axis=1)
        dsoft = dclass_probs * raw.obj[:, None]
        inner = (dsoft * raw.cls_softmax).sum(axis=1, keepdims=True)
        dcls_logits = raw.cls_softmax * (dsoft - inner)
        dobj_logit = dobj * raw.obj * (1.0 - raw.obj)
        return dobj_logit, dcls_logits, dbox_t

    def _assemble_dhead(self, dobj_logit, dcls_logits, dbox_t):
        C, G = self.cfg.classes, self.cfg.grid
        dhead = np.empty((1 + C + 4, G * G))
        dhead[0] = dobj_logit
        dhead[1:1 + C] = dcls_logits.T
        dhead[1 + C:] = dbox_t.T
        return dhead.reshape(1 + C + 4, G, G)

    def backward_input(self, cache: dict, dhead: np.ndarray) -> np.ndarray:
        """Backprop a head-gradient tensor to the input image (HxWx3)."""
        dh = dhead
        for spec, (w, _b), pre, inp in zip(
            reversed(self._specs), reversed(self.params),
            reversed(cache["pre"]), reversed(cache["inputs"]),
        ):
            if spec["act"]:
                dh = dh * _sigmoid(pre)
            dh = kernels.conv_grad_input(dh, w, inp.shape[1:],
                                         spec["stride"], spec["pad"], spec["dil"])
        return dh.transpose(1, 2, 0)

    def backward_params(self, cache: dict, dhead: np.ndarray):
        """Backprop a head-gradient tensor to all conv parameters."""
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        dh = dhead
        for spec, (w, _b), pre, inp, cols in zip(
            reversed(self._specs), reversed(self.params),
            reversed(cache["pre"]), reversed(cache["inputs"]),
            reversed(cache["cols"]),
        ):
            if spec["act"]:
                dh = dh * _sigmoid(pre)
            dw = kernels.conv_grad_weights(dh, cols, w.shape)
            db = dh.reshape(dh.shape[0], -1).sum(axis=1)
            grads.append((dw, db))
            dh = kernels.conv_grad_input(dh, w, inp.shape[1:],
                                         spec["stride"], spec["pad"], spec["dil"])
        grads.reverse()
        return grads

    def loss_gradient(self, image: np.ndarray, loss_fn) -> np.ndarray:
        """Gradient of a scalar loss over raw outputs w.r.t. every pixel.

        loss_fn(raw: RawOutputs) -> (value, (dboxes [M,4], dclass_probs [M,C]));
        either gradient may be None when the loss ignores that output.
        """
        cache = self.forward(image)
        value, (dboxes, dclass_probs) = loss_fn(cache["raw"])
        if not np.isfinite(value):
            raise NumericError(f"loss is non-finite ({value!r})")
        dhead = self._assemble_dhead(
            *self._head_grad(cache["raw"], dboxes, dclass_probs, cache["box_t"])
        )
        grad = self.backward_input(cache, dhead)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite input gradient")
        return grad

    # -- checkpoint ---------------------------------------------------------

    def save(self, path: str) -> None:
        cfg = self.cfg
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<iii", cfg.image_size, cfg.classes, len(cfg.channels)))
            f.write(struct.pack(f"<{len(cfg.channels)}i", *cfg.channels))
            f.write(struct.pack("<fff", cfg.anchor, cfg.score_threshold, cfg.nms_iou))
            arrays = [a for pair in self.params for a in pair]
            f.write(struct.pack("<I", len(arrays)))
            for a in arrays:
                f.write(struct.pack("<I", a.ndim))
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            for a in arrays:
                f.write(a.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str) -> "ToyDetector":
        with open(path, "rb") as f:
            blob = f.read()
        off = 0

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(blob):
                raise CheckpointError(f"{path}: truncated checkpoint")
            vals = struct.unpack_from(fmt, blob, off)
            off += size
            return vals

        if blob[:4] != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
        off = 4
        (version,) = take("<I")
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        image_size, classes, nch = take("<iii")
        channels = take(f"<{nch}i")
        anchor, score_threshold, nms_iou = take("<fff")
        cfg = ToyDetectorConfig(
            image_size=image_size, classes=classes, channels=tuple(channels),
            anchor=float(np.float32(anchor)),
            score_threshold=float(np.float32(score_threshold)),
            nms_iou=float(np.float32(nms_iou)),
        )
        model = cls(cfg)
        (n_arrays,) = take("<I")
        expected = [a.shape for pair in model.params for a in pair]
        if n_arrays != len(expected):
            raise CheckpointError(f"{path}: expected {len(expected)} arrays, got {n_arrays}")
        shapes = []
        for exp_shape in expected:
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            if tuple(shape) != tuple(exp_shape):
                raise CheckpointError(
                    f"{path}: layer shape {tuple(shape)} does not match {tuple(exp_shape)}"
                )
            shapes.append(shape)
        params = []
        for shape in shapes:
            count = int(np.prod(shape))
            size = count * 4
            if off + size > len(blob):
                raise CheckpointError(f"{path}: truncated parameter payload")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += size
            params.append(arr.astype(np.float64).reshape(shape))
        if off != len(blob):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
        model.params = [(params[i], params[i + 1]) for i in range(0, len(params), 2)]
        return model

    def with_thresholds(self, score_threshold=None, nms_iou=None) -> "ToyDetector":
        """Same parameters under adjusted detection thresholds."""
        cfg = replace(
            self.cfg,
            score_threshold=self.cfg.score_threshold if score_threshold is None else score_threshold,
            nms_iou=self.cfg.nms_iou if nms_iou is None else nms_iou,
        )
        clone = ToyDetector(cfg)
        clone.params = self.params
        return clone
