"""Export torchvision's ResNet-18 trunk (through global pooling) as an ONNX backbone.

Writes `resnet18.onnx` (input float32[N,3,224,224], output float32[N,512]) and a
`backbone.json` sidecar with ImageNet normalization into the output directory.

    python3 tools/export_resnet18.py --out models/resnet18
    python3 tools/export_resnet18.py --out models/resnet18 --random-init   # offline

Needs torch, torchvision and onnx.
"""

import argparse
import json
import os

import torch
import torchvision


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--random-init", action="store_true",
                    help="skip the pretrained weight download (for wiring tests only)")
    args = ap.parse_args()

    weights = None if args.random_init else torchvision.models.ResNet18_Weights.IMAGENET1K_V1
    net = torchvision.models.resnet18(weights=weights)
    net.fc = torch.nn.Identity()
    net.eval()

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "resnet18.onnx")
    dummy = torch.zeros(1, 3, 224, 224)
    torch.onnx.export(
        net, dummy, path,
        input_names=["input"], output_names=["features"],
        dynamic_axes={"input": {0: "N"}, "features": {0: "N"}},
        opset_version=13,
    )
    sidecar = {
        "channel_means": [0.485, 0.456, 0.406],
        "channel_stds": [0.229, 0.224, 0.225],
        "out_dim": 512,
    }
    with open(os.path.join(args.out, "backbone.json"), "w") as f:
        json.dump(sidecar, f, indent=2)
    print(path)


if __name__ == "__main__":
    main()
