"""Training for the toy detector: center-cell assignment + Adam.

Each ground-truth instance supervises the grid cell containing its
center (objectness 1, its class, its box offsets); cells whose centers
fall inside some instance box are excluded from the objectness loss so
near-misses are not punished.  Everything is seeded and single-image,
so runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TrainingGateError
from ..evaluation import map50
from .model import STRIDE, ToyDetector, _sigmoid, _softmax_rows

_POS_WEIGHT = 8.0
_BOX_WEIGHT = 1.0


@dataclass
class _Targets:
    obj_t: np.ndarray      # [M] 0/1
    obj_w: np.ndarray      # [M] objectness loss weights (0 = ignore)
    pos: np.ndarray        # [P] positive cell indices
    cls_t: np.ndarray      # [P] class labels
    box_t: np.ndarray      # [P, 4] target offsets (tx, ty, tw, th)


def assign_targets(model: ToyDetector, annotations) -> _Targets:
    cfg = model.cfg
    G = cfg.grid
    M = G * G
    obj_t = np.zeros(M)
    obj_w = np.ones(M)
    pos, cls_t, box_t = [], [], []
    taken = set()
    for a in annotations:
        gx = min(G - 1, max(0, int(a.box.cx // STRIDE)))
        gy = min(G - 1, max(0, int(a.box.cy // STRIDE)))
        m = gy * G + gx
        if m in taken:
            continue  # placement rules make center collisions rare; keep first
        taken.add(m)
        pos.append(m)
        cls_t.append(a.label)
        box_t.append([
            a.box.cx / STRIDE - (gx + 0.5),
            a.box.cy / STRIDE - (gy + 0.5),
            np.log(a.box.w / cfg.anchor),
            np.log(a.box.h / cfg.anchor),
        ])
    # ignore non-positive cells whose centers sit inside an instance box
    if annotations:
        m = np.arange(M)
        cell_cx = (m % G + 0.5) * STRIDE
        cell_cy = (m // G + 0.5) * STRIDE
        inside = np.zeros(M, dtype=bool)
        for a in annotations:
            x1, y1, x2, y2 = a.box.corners()
            inside |= ((cell_cx >= x1) & (cell_cx <= x2)
                       & (cell_cy >= y1) & (cell_cy <= y2))
        obj_w[inside] = 0.0
    pos = np.array(pos, dtype=int)
    obj_t[pos] = 1.0
    obj_w[pos] = _POS_WEIGHT
    return _Targets(obj_t, obj_w, pos,
                    np.array(cls_t, dtype=int),
                    np.array(box_t, dtype=np.float64).reshape(len(pos), 4))


def _loss_and_head_grad(model: ToyDetector, cache: dict, tg: _Targets):
    """Objectness BCE + class CE + box L2 on the head outputs."""
    obj_logit = cache["obj_logit"]
    cls_logits = cache["cls_logits"]
    box_pred = cache["box_t"]

    p = _sigmoid(obj_logit)
    wsum = tg.obj_w.sum()
    eps = 1e-12
    bce = -(tg.obj_t * np.log(p + eps) + (1 - tg.obj_t) * np.log(1 - p + eps))
    loss_obj = float((tg.obj_w * bce).sum() / wsum)
    dobj_logit = tg.obj_w * (p - tg.obj_t) / wsum

    dcls_logits = np.zeros_like(cls_logits)
    dbox = np.zeros_like(box_pred)
    loss_cls = loss_box = 0.0
    P = len(tg.pos)
    if P:
        soft = _softmax_rows(cls_logits[tg.pos])
        loss_cls = float(-np.log(soft[np.arange(P), tg.cls_t] + eps).mean())
        dsoft = soft.copy()
        dsoft[np.arange(P), tg.cls_t] -= 1.0
        dcls_logits[tg.pos] = dsoft / P

        diff = box_pred[tg.pos] - tg.box_t
        loss_box = float(_BOX_WEIGHT * (diff ** 2).sum() / P)
        dbox[tg.pos] = _BOX_WEIGHT * 2.0 * diff / P

    dhead = model._assemble_dhead(dobj_logit, dcls_logits, dbox)
    return loss_obj + loss_cls + loss_box, dhead


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, ((w, b), (dw, db)) in enumerate(zip(params, grads)):
            for arr, g, m, v in ((w, dw, self.m[i][0], self.v[i][0]),
                                 (b, db, self.m[i][1], self.v[i][1])):
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def evaluate_map(model: ToyDetector, scenes) -> float:
    dets = [model.detect(s.image) for s in scenes]
    gts = [s.annotations for s in scenes]
    return map50(dets, gts)


def train_toy(model: ToyDetector, train_scenes, val_scenes, epochs: int,
              lr: float = 2e-3, seed: int = 0, gate: float | None = None,
              log_every: int = 0):
    """Train in place for `epochs` passes; returns (model, val_map).

    epochs == 0 leaves the model untouched and just evaluates it.  When a
    gate is given, failing to reach it raises TrainingGateError.
    """
    if epochs > 0:
        rng = np.random.default_rng(seed)
        opt = _Adam(model.params, lr)
        for epoch in range(epochs):
            order = rng.permutation(len(train_scenes))
            for step_i, idx in enumerate(order):
                scene = train_scenes[int(idx)]
                cache = model.forward(scene.image)
                tg = assign_targets(model, scene.annotations)
                loss, dhead = _loss_and_head_grad(model, cache, tg)
                grads = model.backward_params(cache, dhead)
                opt.step(model.params, grads)
                if log_every and (step_i + 1) % log_every == 0:
                    print(f"epoch {epoch} step {step_i + 1}/{len(order)} "
                          f"loss {loss:.4f}")
    val_map = evaluate_map(model, val_scenes)
    if gate is not None and val_map < gate:
        raise TrainingGateError(
            f"validation mAP {val_map:.4f} below the configured floor {gate}"
        )
    return model, val_map
