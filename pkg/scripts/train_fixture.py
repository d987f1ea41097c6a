"""Train the tiny float CNN shipped as the test fixture.

Run once, offline:  python scripts/train_fixture.py
Needs torch, which the package itself does not depend on.

The network is trained dense-sparse-dense: dense warm-up, gradual
magnitude pruning to a per-layer sparsity, then a short low learning rate
phase with the masks released. Regrown weights stay small (most fall
below the smallest 4-bit exponent and encode as zero), so one-shot
magnitude pruning at inference costs little accuracy. On export each
conv is refactored into ``conv' -> batchnorm`` with a fixed per-channel
affine, ``a * conv'(x) + b == conv(x)``, so the fixture still exercises
batchnorm folding.
"""
import argparse
from pathlib import Path

import numpy as np
import torch
from torch import nn

from psb.graph import Layer, Model
from psb.modelio import FIXTURE_DATA, fixture_dataset, fixture_path, save_model
from psb.oracle import float_forward

WIDTH = 20
KERNEL1 = 5


class TinyCNN(nn.Module):
    def __init__(self, classes, width=WIDTH, k1=KERNEL1):
        super().__init__()
        self.c1 = nn.Conv2d(1, width, k1, padding=k1 // 2)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)
        self.fc = nn.Linear(width, classes)

    def forward(self, x):
        x = torch.max_pool2d(torch.relu(self.c1(x)), 2)
        x = torch.relu(self.c2(x))
        return self.fc(x.mean(dim=(2, 3)))

    def linear_weights(self):
        return (self.c1.weight, self.c2.weight, self.fc.weight)


def _split_bn(conv, rng):
    """Factor a conv into (kernel, bias) plus a batchnorm affine (scale, offset)."""
    w = conv.weight.detach().double().numpy().transpose(2, 3, 1, 0)  # OIHW -> HWIO
    bias = conv.bias.detach().double().numpy()
    a = rng.uniform(0.5, 2.0, w.shape[-1])
    b = rng.uniform(-0.25, 0.25, w.shape[-1])
    return w / a, (bias - b) / a, a, b


def export(net) -> Model:
    rng = np.random.default_rng(7)
    k1, c1, a1, o1 = _split_bn(net.c1, rng)
    k2, c2, a2, o2 = _split_bn(net.c2, rng)
    size = FIXTURE_DATA["size"]
    layers = [
        Layer("conv1", "conv2d", ("input",), weight=k1, bias=c1),
        Layer("bn1", "batchnorm", ("conv1",), scale=a1, offset=o1),
        Layer("relu1", "relu", ("bn1",)),
        Layer("pool1", "maxpool", ("relu1",), pool=2),
        Layer("conv2", "conv2d", ("pool1",), weight=k2, bias=c2),
        Layer("bn2", "batchnorm", ("conv2",), scale=a2, offset=o2),
        Layer("relu2", "relu", ("bn2",)),
        Layer("gap", "global_avgpool", ("relu2",)),
        Layer("fc", "dense", ("gap",), weight=net.fc.weight.detach().double().numpy(),
              bias=net.fc.bias.detach().double().numpy()),
    ]
    return Model(layers, (size, size, 1), {"format": "float", "task": "oriented-blobs"}, "fixture_cnn")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--width", type=int, default=WIDTH)
    ap.add_argument("--k1", type=int, default=KERNEL1, help="first conv kernel size (odd)")
    ap.add_argument("--l1", type=float, default=0.0)
    ap.add_argument("--sparsity", type=float, default=0.9,
                    help="per-layer sparsity reached by gradual magnitude pruning")
    ap.add_argument("--dense-epochs", type=int, default=3,
                    help="final epochs with pruning masks released")
    ap.add_argument("--dense-lr", type=float, default=2e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=fixture_path())
    args = ap.parse_args()
    torch.manual_seed(args.seed)
    train = fixture_dataset("train", per_class=1024)
    test = fixture_dataset("test")
    xt = torch.tensor(train.images[:, None], dtype=torch.float32)
    yt = torch.tensor(train.labels)
    net = TinyCNN(FIXTURE_DATA["classes"], args.width, args.k1)
    opt = torch.optim.Adam(net.parameters(), lr=5e-3)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(1, args.epochs // 2), gamma=0.3)
    masks = [torch.ones_like(w, dtype=torch.bool) for w in net.linear_weights()]
    ramp = (args.epochs // 4, 3 * args.epochs // 4)
    for epoch in range(args.epochs + args.dense_epochs):
        if epoch == args.epochs:
            for m in masks:
                m.fill_(True)
            for group in opt.param_groups:
                group["lr"] = args.dense_lr
        if args.sparsity and ramp[0] <= epoch <= ramp[1]:
            t = (epoch - ramp[0]) / max(1, ramp[1] - ramp[0])
            target = args.sparsity * (1 - (1 - t) ** 3)
            with torch.no_grad():
                for w, m in zip(net.linear_weights(), masks):
                    k = int(target * w.numel())
                    if k:
                        thr = w.abs().flatten().kthvalue(k).values
                        m.copy_(w.abs() > thr)
                    w.mul_(m)
        perm = torch.randperm(len(yt))
        for i in range(0, len(yt), 128):
            b = perm[i:i + 128]
            loss = nn.functional.cross_entropy(net(xt[b]), yt[b])
            loss = loss + args.l1 * sum(w.abs().sum() for w in net.linear_weights())
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for w, m in zip(net.linear_weights(), masks):
                    w.mul_(m)
        if epoch < args.epochs:
            sched.step()
    model = export(net)
    logits = float_forward(model, test.inputs)
    acc = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    print(f"float test accuracy {acc:.4f}, max |logit| {np.abs(logits).max():.2f}")
    save_model(model, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
