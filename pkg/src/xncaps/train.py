"""Toy end-to-end training: one convolution into primary capsules, then a capsule head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import LabeledImages
from .grad import backward, record_forward, squash_vjp
from .routing import MarginLoss, ProjectorConfig, squash

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    layer: str = "xnidr"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    kernel: int = 5
    stride: int = 2
    capsule_types: int = 2
    dim_in: int = 8
    dim_out: int = 8
    iterations: int = 3
    seed: int = 0
    loss: MarginLoss = MarginLoss()


def conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """``[bs, h, w, c]`` to ``[bs, oh, ow, kernel*kernel*c]`` patches (valid padding)."""
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    bs, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(bs, oh, ow, -1)


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class CapsModel:
    cfg: TrainConfig
    head: ProjectorConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, image_shape: tuple[int, int, int], num_classes: int, cfg: TrainConfig) -> "CapsModel":
        h, w, c = image_shape
        oh, ow = conv_out(h, cfg.kernel, cfg.stride), conv_out(w, cfg.kernel, cfg.stride)
        if oh < 1 or ow < 1:
            raise ValueError(f"a {cfg.kernel}px kernel does not fit {h}x{w} images")
        head = ProjectorConfig(oh * ow * cfg.capsule_types, num_classes, cfg.dim_in, cfg.dim_out, cfg.iterations)
        rng = np.random.default_rng(cfg.seed)
        fan_in = cfg.kernel * cfg.kernel * c
        filters = cfg.capsule_types * cfg.dim_in
        params = {
            "conv_w": rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, filters)),
            "conv_b": np.zeros(filters),
            "caps_w": rng.normal(0, 1 / np.sqrt(cfg.dim_in), head.weight_shape),
        }
        return cls(cfg, head, params)

    def primary(self, images: np.ndarray):
        patches = im2col(images.astype(np.float64), self.cfg.kernel, self.cfg.stride)
        pre = patches @ self.params["conv_w"] + self.params["conv_b"]
        bs = len(images)
        # capsule = dim_in consecutive channels at one location and capsule type
        s = pre.reshape(bs, -1, self.cfg.dim_in)
        return patches, s, squash(s)

    def forward(self, images: np.ndarray):
        patches, s, p = self.primary(images)
        tape = record_forward(p, self.params["caps_w"], self.head, self.cfg.layer)
        return tape, (patches, s)

    def loss_and_grads(self, images: np.ndarray, targets: np.ndarray):
        tape, (patches, s) = self.forward(images)
        loss = self.cfg.loss(tape.scores, targets)
        g = backward(tape, self.cfg.loss.grad(tape.scores, targets))
        d_pre = squash_vjp(s, g.p).reshape(patches.shape[:3] + (-1,))
        grads = {
            "conv_w": np.einsum("nhwk,nhwf->kf", patches, d_pre),
            "conv_b": d_pre.sum(axis=(0, 1, 2)),
            "caps_w": g.W,
        }
        return loss, grads, tape.scores

    def evaluate(self, data: LabeledImages) -> tuple[float, float]:
        tape, _ = self.forward(data.images)
        targets = data.one_hot()
        pred = np.argmax(tape.scores, axis=1)
        return self.cfg.loss(tape.scores, targets), float(np.mean(pred == data.labels[:, 0]))


@dataclass
class TrainResult:
    losses: list[float]
    accuracies: list[float]
    model: CapsModel

    def as_dict(self) -> dict:
        return {
            "layer": self.model.cfg.layer,
            "epochs": len(self.losses) - 1,
            "losses": self.losses,
            "accuracies": self.accuracies,
            "final_loss": self.losses[-1],
            "final_accuracy": self.accuracies[-1],
        }


def train_demo(data: LabeledImages, cfg: TrainConfig) -> TrainResult:
    """Train on ``data``; entry 0 of the curves is the untrained model.

    Each later entry is the full-training-set loss/accuracy after that epoch.
    """
    model = CapsModel.init(data.images.shape[1:], data.num_classes, cfg)
    opt = Adam(model.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    targets = data.one_hot()
    loss, acc = model.evaluate(data)
    losses, accs = [loss], [acc]
    log.info("epoch 0 loss %.6f acc %.4f", loss, acc)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * (epoch - 1) / cfg.epochs))
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads, _ = model.loss_and_grads(data.images[idx], targets[idx])
            opt.step(model.params, grads)
        loss, acc = model.evaluate(data)
        losses.append(loss)
        accs.append(acc)
        log.info("epoch %d loss %.6f acc %.4f", epoch, loss, acc)
    return TrainResult(losses, accs, model)
