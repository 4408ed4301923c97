#!/usr/bin/env python
"""Regenerate fixtures/resnet34ish.prototxt: a ResNet-34-style backbone
(basic blocks [3,4,6,3], eltwise SUM residuals, projection shortcuts) at
quarter width for desk-scale runs."""

import os

WIDTHS = [16, 32, 64, 128]
BLOCKS = [3, 4, 6, 3]
LINES = []


def layer(name, kind, bottoms, top, body=""):
    b = "".join(f'  bottom: "{x}"\n' for x in bottoms)
    LINES.append(f'layer {{\n  name: "{name}"\n  type: "{kind}"\n{b}  top: "{top}"\n{body}}}')


def conv(name, bottom, top, out, k, s, p):
    layer(name, "Convolution", [bottom], top,
          f"  convolution_param {{\n    num_output: {out}\n    kernel_size: {k}\n"
          f"    stride: {s}\n    pad: {p}\n  }}\n")


def main():
    LINES.append('name: "resnet34ish"')
    layer("data", "Input", [], "data",
          "  input_param {\n    shape {\n      dim: 1\n      dim: 3\n      dim: 64\n      dim: 64\n    }\n  }\n")
    conv("conv1", "data", "conv1", WIDTHS[0], 7, 2, 3)
    layer("bn1", "BatchNorm", ["conv1"], "bn1")
    layer("relu1", "ReLU", ["bn1"], "relu1")
    layer("pool1", "Pooling", ["relu1"], "pool1",
          "  pooling_param {\n    pool: MAX\n    kernel_size: 3\n    stride: 2\n    pad: 1\n  }\n")
    prev = "pool1"
    for stage, (width, blocks) in enumerate(zip(WIDTHS, BLOCKS)):
        for b in range(blocks):
            tag = f"s{stage + 1}b{b + 1}"
            stride = 2 if (stage > 0 and b == 0) else 1
            conv(f"{tag}_conv1", prev, f"{tag}_conv1", width, 3, stride, 1)
            layer(f"{tag}_bn1", "BatchNorm", [f"{tag}_conv1"], f"{tag}_bn1")
            layer(f"{tag}_relu1", "ReLU", [f"{tag}_bn1"], f"{tag}_relu1")
            conv(f"{tag}_conv2", f"{tag}_relu1", f"{tag}_conv2", width, 3, 1, 1)
            layer(f"{tag}_bn2", "BatchNorm", [f"{tag}_conv2"], f"{tag}_bn2")
            shortcut = prev
            if b == 0 and stage > 0:
                conv(f"{tag}_down", prev, f"{tag}_down", width, 1, 2, 0)
                layer(f"{tag}_downbn", "BatchNorm", [f"{tag}_down"], f"{tag}_downbn")
                shortcut = f"{tag}_downbn"
            layer(f"{tag}_add", "Eltwise", [f"{tag}_bn2", shortcut], f"{tag}_add",
                  "  eltwise_param {\n    operation: SUM\n  }\n")
            layer(f"{tag}_relu2", "ReLU", [f"{tag}_add"], f"{tag}_relu2")
            prev = f"{tag}_relu2"
    layer("pool_final", "Pooling", [prev], "pool_final",
          "  pooling_param {\n    pool: AVE\n    kernel_size: 2\n    stride: 2\n  }\n")
    layer("fc", "InnerProduct", ["pool_final"], "fc",
          "  inner_product_param {\n    num_output: 10\n  }\n")
    out = os.path.join(os.path.dirname(__file__), "..", "fixtures", "resnet34ish.prototxt")
    with open(out, "w") as f:
        f.write("\n".join(LINES) + "\n")
    print(f"wrote {os.path.normpath(out)} ({sum(l.startswith('layer') for l in LINES)} layers)")


if __name__ == "__main__":
    main()
