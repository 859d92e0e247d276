"""Run a backbone graph under onnxruntime on fixed inputs and print the outputs as JSON.

The Rust test suite compares its own execution of the same graph against these
numbers. Regenerate the fixture with:

    cargo run -p palmscan-cli -- reference-backbone --out /tmp/refbb --seed 17
    python3 tools/ort_reference.py /tmp/refbb/reference_cnn.onnx \
        > crates/core/tests/fixtures/reference_cnn_seed17.json
"""

import json
import sys

import numpy as np
import onnxruntime as ort

MEANS = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STDS = np.array([0.229, 0.224, 0.225], dtype=np.float32)
SIZE = 224


def normalize(rgb):
    """rgb: uint8 array [H, W, 3] already at 224x224."""
    x = rgb.astype(np.float32) / np.float32(255.0)
    x = (x - MEANS) / STDS
    return x.transpose(2, 0, 1)[None].astype(np.float32)


def gradient_patch():
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    chans = [(x * 7 + y * 13 + c * 51) % 256 for c in range(3)]
    return np.stack(chans, axis=-1).astype(np.uint8)


def main(path):
    sess = ort.InferenceSession(path, providers=["CPUExecutionProvider"])
    black = np.zeros((SIZE, SIZE, 3), dtype=np.uint8)
    out = {}
    for name, img in [("black", black), ("gradient", gradient_patch())]:
        y = sess.run(None, {sess.get_inputs()[0].name: normalize(img)})[0]
        out[name] = [float(v) for v in y[0]]
    json.dump(out, sys.stdout, indent=1)
    print()


if __name__ == "__main__":
    main(sys.argv[1])
