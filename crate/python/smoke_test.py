"""Smoke test for the onnx2hls Python module.

Build and install the extension first:

    pip install --no-build-isolation -e crates/py

then run `python python/smoke_test.py` from the repository root.
"""

import os
import sys
import tempfile

import onnx2hls

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
FIXTURE = os.path.join(ROOT, "fixtures", "mnist_cnn.onnx")
MNIST = os.path.join(ROOT, "data", "mnist")


def argmax(xs):
    return max(range(len(xs)), key=lambda i: (xs[i], -i))


def main():
    model = onnx2hls.load_model(FIXTURE)
    assert model.input_shape == [1, 28, 28], model.input_shape
    assert model.output_shape == [10]
    print(model, [kind for _, kind, _ in model.layers])

    data = onnx2hls.Mnist(MNIST)
    assert (data.train_count, data.test_count) == (60000, 10000)
    calib = [data.train_item(i)[0] for i in range(64)]

    q16 = model.quantize("D16-W16", calib)
    q8 = model.quantize("D16-W8", calib)
    assert q16.param_bits == 2 * q8.param_bits
    print(f"{q8.datatype}: {q8.param_bits} parameter bits, {100 * q8.zero_weight_fraction:.2f}% zero weights")

    graph = q8.dataflow()
    print(graph)
    correct = 0
    for i in range(8):
        image, label = data.test_item(i)
        codes = q8.quantize_input(image)
        out, metrics = graph.run_image(codes)
        assert out == q8.reference(codes), "stream and reference disagree"
        assert metrics["interval_cycles"] <= metrics["latency_cycles"]
        correct += argmax(out) == label
    print(f"streamed 8 test images, {correct} correct, latency {metrics['latency_cycles']} cycles")

    batch = [q8.quantize_input(data.test_item(i)[0]) for i in range(3)]
    assert graph.run(batch)[0] == graph.run(batch, seed=7)[0]

    with tempfile.TemporaryDirectory() as out:
        files = graph.emit(q8, out)
        assert "topology.xdf" in files and "build.tcl" in files
        actors, connections = onnx2hls.parse_topology(files["topology.xdf"])
        assert actors == graph.actors and connections == graph.connections
        assert os.path.isfile(os.path.join(out, "src", "conv0.cpp"))

    md = onnx2hls.merge([graph, model.quantize("D16-W4", calib).dataflow()])
    assert md.config_count == 2 and md.actor_count < 2 * len(graph.actors)
    assert md.execute(0, batch[0]) == graph.run_image(batch[0])[0]

    try:
        onnx2hls.parse_datatype("D7-X2")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("malformed datatype accepted")

    report = onnx2hls.explore(model, "D16-W8,D16-W2", MNIST, eval=50)
    print(report, end="")
    assert report.splitlines()[0].startswith("datatype,zero_weights_pct")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
