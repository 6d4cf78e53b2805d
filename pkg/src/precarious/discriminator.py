"""Real-vs-synthetic image classifier used to find imposters."""

from dataclasses import dataclass

import numpy as np

from .autodiff import (Conv2d, Linear, MaxPool2d, Network, ReLU, checkpoint_bytes,
                       load_checkpoint, logistic_loss, save_checkpoint, sgd_step, sigmoid)
from .seeding import rng_for

WIDTHS = (8, 16, 32, 32)


def build_network(input_size=(96, 72), widths=WIDTHS):
    layers = []
    cin = 3
    w, h = input_size
    for i, cout in enumerate(widths, start=1):
        layers += [Conv2d(f"conv{i}", cin, cout), ReLU(f"relu{i}"), MaxPool2d(f"pool{i}")]
        cin = cout
        w, h = w // 2, h // 2
    if w == 0 or h == 0:
        raise ValueError(f"input {input_size} too small for {len(widths)} pooling stages")
    layers.append(Linear("fc", cin * w * h, 1))
    return Network.sequential(layers)


@dataclass
class DiscriminatorModel:
    params: object
    input_size: tuple = (96, 72)
    epoch: int = 0
    network: Network = None

    def __post_init__(self):
        if self.network is None:
            self.network = build_network(self.input_size)

    def with_params(self, params, epoch=None):
        return DiscriminatorModel(params, self.input_size, self.epoch if epoch is None else epoch, self.network)

    def header(self):
        return {"kind": "discriminator", "input_size": list(self.input_size), "epoch": self.epoch}

    def save(self, path):
        save_checkpoint(path, self.params, self.header())

    def checkpoint_bytes(self):
        return checkpoint_bytes(self.params, self.header())

    @classmethod
    def load(cls, path):
        params, extra = load_checkpoint(path)
        if extra.get("kind") != "discriminator":
            raise ValueError(f"{path} is not a discriminator checkpoint")
        return cls(params, tuple(extra["input_size"]), int(extra["epoch"]))


def init_discriminator(seed, input_size=(96, 72)):
    net = build_network(input_size)
    return DiscriminatorModel(net.init_params(seed), tuple(input_size), 0, net)


def _as_batch(images, input_size):
    if isinstance(images, np.ndarray) and images.dtype == np.float64:
        x = images
    else:
        x = np.stack([im.pixels if hasattr(im, "pixels") else im for im in images]).astype(np.float64)
        x = x / 127.5 - 1.0
    if x.shape[1:3] != (input_size[1], input_size[0]):
        raise ValueError(f"images are {x.shape[2]}x{x.shape[1]}, discriminator expects "
                         f"{input_size[0]}x{input_size[1]}")
    return x


def logits(model, images, batch_size=64):
    x = _as_batch(images, model.input_size)
    out = [model.network.forward(model.params, x[i:i + batch_size])[model.network.outputs[0]]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)[:, 0] if out else np.zeros(0)


def score_batch(model, images):
    """Probability that each image is real; always strictly inside (0, 1)."""
    return sigmoid(np.clip(logits(model, images), -30.0, 30.0))


def score(model, image):
    return float(score_batch(model, [image])[0])


def class_weights(labels):
    """Per-example weights giving both classes equal total weight."""
    labels = np.asarray(labels)
    n_real = int((labels == 1).sum())
    n_synth = int((labels == 0).sum())
    return np.where(labels == 1, 0.5 / max(n_real, 1), 0.5 / max(n_synth, 1))


def evaluate(model, x, y, w=None):
    z = logits(model, x)
    w = class_weights(y) if w is None else w
    loss, _ = logistic_loss(z, y, w)
    acc = float(np.mean((z > 0) == (y == 1)))
    return loss, acc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    heldout_acc: float


def train_discriminator(real_images, synth_images, config, heldout=None, init=None, input_size=(96, 72)):
    """Train with labels real=1 / synthetic=0 and class-balanced logistic loss.

    ``heldout`` is an optional (real_images, synth_images) pair for the log.
    Returns (final model, per-epoch snapshots, per-epoch records).
    """
    if len(real_images) == 0 or len(synth_images) == 0:
        raise ValueError("both the real and the synthetic set must be non-empty")
    model = init or init_discriminator(config.seed, input_size)
    x = np.concatenate([_as_batch(real_images, model.input_size), _as_batch(synth_images, model.input_size)])
    y = np.concatenate([np.ones(len(real_images)), np.zeros(len(synth_images))])
    w = class_weights(y)
    if heldout is not None:
        hx = np.concatenate([_as_batch(heldout[0], model.input_size), _as_batch(heldout[1], model.input_size)])
        hy = np.concatenate([np.ones(len(heldout[0])), np.zeros(len(heldout[1]))])
    net = model.network
    out_name = net.outputs[0]
    velocity = None
    snapshots, records = [], []
    for epoch in range(1, config.epochs + 1):
        order = rng_for(config.seed, "discriminator-epoch", epoch).permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            outputs, tape = net.forward(model.params, x[idx], record=True)
            _, dz = logistic_loss(outputs[out_name][:, 0], y[idx], w[idx])
            grads = net.backward(model.params, tape, {out_name: dz[:, None]})
            params, velocity = sgd_step(model.params, grads, config, velocity)
            model = model.with_params(params)
        model = model.with_params(model.params, epoch)
        loss, acc = evaluate(model, x, y, w)
        held = evaluate(model, hx, hy)[1] if heldout is not None else float("nan")
        snapshots.append(model)
        records.append(EpochRecord(epoch, loss, acc, held))
    return model, snapshots, records


def write_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,trainLoss,trainAcc,heldoutAcc\n")
        for r in records:
            fh.write(f"{r.epoch},{r.train_loss:.10g},{r.train_acc:.10g},{r.heldout_acc:.10g}\n")
