"""Train the MNIST fixture CNN offline and export it as ONNX plus a JSON mirror.

Network: two blocks of (Conv 3x3 -> MaxPool 2x2 -> BatchNorm -> ReLU), then one
fully connected layer. Pixels are scaled to [0, 1] (divide by 255), no mean/std
normalization, matching the Rust loader.

The JSON mirror is produced from the exported ONNX file through the `onnx`
package, independently of the Rust encoder, so that the binary and JSON decoders
can be cross-checked.

Usage: python3 scripts/train_fixture.py [--mnist data/mnist] [--out fixtures]
"""

import argparse
import gzip
import json
import os
import struct

import numpy as np
import onnx
import torch
import torch.nn as nn
from onnx import numpy_helper


def read_idx(path):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        data = f.read()
    magic = struct.unpack(">I", data[:4])[0]
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, data[4 : 4 + 4 * ndim])
    return np.frombuffer(data[4 + 4 * ndim :], dtype=np.uint8).reshape(dims)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 8, 3)
        self.pool1 = nn.MaxPool2d(2, 2)
        self.bn1 = nn.BatchNorm2d(8)
        self.conv2 = nn.Conv2d(8, 16, 3)
        self.pool2 = nn.MaxPool2d(2, 2)
        self.bn2 = nn.BatchNorm2d(16)
        self.fc = nn.Linear(16 * 5 * 5, 10)

    def forward(self, x):
        x = torch.relu(self.bn1(self.pool1(self.conv1(x))))
        x = torch.relu(self.bn2(self.pool2(self.conv2(x))))
        return self.fc(torch.flatten(x, 1))


def json_mirror(model_path):
    m = onnx.load(model_path)
    g = m.graph

    def attr_value(a):
        if a.type == onnx.AttributeProto.INT:
            return a.i
        if a.type == onnx.AttributeProto.FLOAT:
            return float(a.f)
        if a.type == onnx.AttributeProto.INTS:
            return list(a.ints)
        if a.type == onnx.AttributeProto.FLOATS:
            return {"floats": [float(v) for v in a.floats]}
        if a.type == onnx.AttributeProto.STRING:
            return {"string": a.s.decode()}
        raise ValueError(f"unsupported attribute type {a.type}")

    def shape_of(vi):
        return [d.dim_value if d.HasField("dim_value") else -1 for d in vi.type.tensor_type.shape.dim]

    nodes = [
        {
            "op_type": n.op_type,
            "inputs": list(n.input),
            "outputs": list(n.output),
            "attributes": {a.name: attr_value(a) for a in n.attribute},
        }
        for n in g.node
    ]
    inits = {}
    for t in g.initializer:
        arr = numpy_helper.to_array(t).astype(np.float32)
        inits[t.name] = {"shape": list(t.dims), "data": [float(v) for v in arr.reshape(-1)]}
    opset = next((o.version for o in m.opset_import if o.domain in ("", "ai.onnx")), 13)
    return {
        "graph_name": g.name,
        "nodes": nodes,
        "initializers": inits,
        "inputs": [[vi.name, shape_of(vi)] for vi in g.input],
        "outputs": [[vi.name, shape_of(vi)] for vi in g.output],
        "opset_version": opset,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", default="data/mnist")
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()

    torch.manual_seed(7)
    np.random.seed(7)
    torch.use_deterministic_algorithms(True)

    x = read_idx(os.path.join(args.mnist, "train-images-idx3-ubyte.gz")).astype(np.float32) / 255.0
    y = read_idx(os.path.join(args.mnist, "train-labels-idx1-ubyte.gz")).astype(np.int64)
    xt = read_idx(os.path.join(args.mnist, "t10k-images-idx3-ubyte.gz")).astype(np.float32) / 255.0
    yt = read_idx(os.path.join(args.mnist, "t10k-labels-idx1-ubyte.gz")).astype(np.int64)
    x = torch.from_numpy(x).unsqueeze(1)
    y = torch.from_numpy(y)
    xt = torch.from_numpy(xt).unsqueeze(1)
    yt = torch.from_numpy(yt)

    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(args.epochs):
        net.train()
        perm = torch.randperm(x.shape[0])
        for i in range(0, x.shape[0], 128):
            idx = perm[i : i + 128]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            acc = (net(xt).argmax(1) == yt).float().mean().item()
        print(f"epoch {epoch}: test accuracy {acc:.4f}")

    os.makedirs(args.out, exist_ok=True)
    onnx_path = os.path.join(args.out, "mnist_cnn.onnx")
    net.eval()
    torch.onnx.export(
        net,
        torch.zeros(1, 1, 28, 28),
        onnx_path,
        input_names=["image"],
        output_names=["logits"],
        opset_version=13,
        do_constant_folding=False,
        dynamo=False,
    )
    onnx.checker.check_model(onnx.load(onnx_path))
    with open(os.path.join(args.out, "mnist_cnn.json"), "w") as f:
        json.dump(json_mirror(onnx_path), f)
    print("ops:", [n.op_type for n in onnx.load(onnx_path).graph.node])


if __name__ == "__main__":
    main()
