#!/usr/bin/env python3
"""Generate the shipped model profile JSON files in profiles/.

Layer tables follow the publicly documented architecture shapes
(ResNet-50 v1.5, VGG-16 configuration D, GoogLeNet inception v1, plus a
synthetic FC-heavy MLP). Derived fields are computed with the same
formulas the loader validates against:

  Conv param_count            = C*K*KH*KW (+K if bias)
  FullyConnected param_count  = C*K (+K if bias)
  Conv fwd_flops_per_sample   = 2*C*K*KH*KW*OH*OW
  FC fwd_flops_per_sample     = 2*C*K
  NonParam fwd_flops_per_sample = K*OH*OW*KH*KW
"""

import json
import os

OUT_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "profiles")


def conv(name, c, k, kh, kw, oh, ow, stride=1, bias=False):
    return {
        "name": name, "kind": "Conv", "C": c, "K": k,
        "OH": oh, "OW": ow, "KH": kh, "KW": kw,
        "stride": stride, "has_bias": bias,
    }


def fc(name, c, k, bias=True):
    return {
        "name": name, "kind": "FullyConnected", "C": c, "K": k,
        "OH": 1, "OW": 1, "KH": 1, "KW": 1, "stride": 1, "has_bias": bias,
    }


def pool(name, channels, kh, kw, oh, ow, stride):
    return {
        "name": name, "kind": "NonParam", "C": channels, "K": channels,
        "OH": oh, "OW": ow, "KH": kh, "KW": kw, "stride": stride,
        "has_bias": False,
    }


def finish(layers):
    for i, ly in enumerate(layers):
        ly["id"] = i
        if ly["kind"] == "Conv":
            ly["param_count"] = ly["C"] * ly["K"] * ly["KH"] * ly["KW"] + (ly["K"] if ly["has_bias"] else 0)
            ly["fwd_flops_per_sample"] = 2.0 * ly["C"] * ly["K"] * ly["KH"] * ly["KW"] * ly["OH"] * ly["OW"]
        elif ly["kind"] == "FullyConnected":
            ly["param_count"] = ly["C"] * ly["K"] + (ly["K"] if ly["has_bias"] else 0)
            ly["fwd_flops_per_sample"] = 2.0 * ly["C"] * ly["K"]
        else:
            ly["param_count"] = 0
            ly["fwd_flops_per_sample"] = float(ly["K"] * ly["OH"] * ly["OW"] * ly["KH"] * ly["KW"])
    return layers


def resnet50():
    layers = [
        conv("conv1", 3, 64, 7, 7, 112, 112, stride=2),
        pool("pool1", 64, 3, 3, 56, 56, 2),
    ]
    # (blocks, width, spatial-out); v1.5 puts the stride on the 3x3 conv.
    stages = [(3, 64, 56), (4, 128, 28), (6, 256, 14), (3, 512, 7)]
    c_in = 64
    for si, (blocks, w, sp) in enumerate(stages):
        for b in range(blocks):
            first = b == 0
            stride = 2 if (first and si > 0) else 1
            sp_in = sp * stride
            tag = f"res{si + 2}{chr(ord('a') + b)}"
            layers.append(conv(f"{tag}_branch2a", c_in, w, 1, 1, sp_in, sp_in))
            layers.append(conv(f"{tag}_branch2b", w, w, 3, 3, sp, sp, stride=stride))
            layers.append(conv(f"{tag}_branch2c", w, 4 * w, 1, 1, sp, sp))
            if first:
                layers.append(conv(f"{tag}_branch1", c_in, 4 * w, 1, 1, sp, sp, stride=stride))
            c_in = 4 * w
    layers.append(pool("pool5", 2048, 7, 7, 1, 1, 1))
    layers.append(fc("fc1000", 2048, 1000))
    return {"name": "resnet50", "default_minibatch": 32, "layers": finish(layers)}


def vgg16():
    cfg = [(2, 64, 224), (2, 128, 112), (3, 256, 56), (3, 512, 28), (3, 512, 14)]
    layers = []
    c_in = 3
    for bi, (reps, k, sp) in enumerate(cfg):
        for r in range(reps):
            layers.append(conv(f"conv{bi + 1}_{r + 1}", c_in, k, 3, 3, sp, sp, bias=True))
            c_in = k
        layers.append(pool(f"pool{bi + 1}", k, 2, 2, sp // 2, sp // 2, 2))
    layers.append(fc("fc6", 512 * 7 * 7, 4096))
    layers.append(fc("fc7", 4096, 4096))
    layers.append(fc("fc8", 4096, 1000))
    return {"name": "vgg16", "default_minibatch": 32, "layers": finish(layers)}


def googlenet():
    # (name, in, #1x1, #3x3red, #3x3, #5x5red, #5x5, poolproj, spatial)
    inception = [
        ("3a", 192, 64, 96, 128, 16, 32, 32, 28),
        ("3b", 256, 128, 128, 192, 32, 96, 64, 28),
        ("4a", 480, 192, 96, 208, 16, 48, 64, 14),
        ("4b", 512, 160, 112, 224, 24, 64, 64, 14),
        ("4c", 512, 128, 128, 256, 24, 64, 64, 14),
        ("4d", 512, 112, 144, 288, 32, 64, 64, 14),
        ("4e", 528, 256, 160, 320, 32, 128, 128, 14),
        ("5a", 832, 256, 160, 320, 32, 128, 128, 7),
        ("5b", 832, 384, 192, 384, 48, 128, 128, 7),
    ]
    layers = [
        conv("conv1", 3, 64, 7, 7, 112, 112, stride=2, bias=True),
        pool("pool1", 64, 3, 3, 56, 56, 2),
        conv("conv2_reduce", 64, 64, 1, 1, 56, 56, bias=True),
        conv("conv2", 64, 192, 3, 3, 56, 56, bias=True),
        pool("pool2", 192, 3, 3, 28, 28, 2),
    ]
    for name, cin, n1, n3r, n3, n5r, n5, pp, sp in inception:
        layers.append(conv(f"inc{name}_1x1", cin, n1, 1, 1, sp, sp, bias=True))
        layers.append(conv(f"inc{name}_3x3_reduce", cin, n3r, 1, 1, sp, sp, bias=True))
        layers.append(conv(f"inc{name}_3x3", n3r, n3, 3, 3, sp, sp, bias=True))
        layers.append(conv(f"inc{name}_5x5_reduce", cin, n5r, 1, 1, sp, sp, bias=True))
        layers.append(conv(f"inc{name}_5x5", n5r, n5, 5, 5, sp, sp, bias=True))
        layers.append(conv(f"inc{name}_pool_proj", cin, pp, 1, 1, sp, sp, bias=True))
        if name == "3b":
            layers.append(pool("pool3", 480, 3, 3, 14, 14, 2))
        elif name == "4e":
            layers.append(pool("pool4", 832, 3, 3, 7, 7, 2))
    layers.append(pool("pool5", 1024, 7, 7, 1, 1, 1))
    layers.append(fc("fc1000", 1024, 1000))
    return {"name": "googlenet", "default_minibatch": 32, "layers": finish(layers)}


def mlp():
    layers = [
        fc("fc1", 784, 4096),
        fc("fc2", 4096, 4096),
        fc("fc3", 4096, 4096),
        fc("fc4", 4096, 1000),
    ]
    return {"name": "mlp", "default_minibatch": 8, "layers": finish(layers)}


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    for profile in (resnet50(), vgg16(), googlenet(), mlp()):
        path = os.path.join(OUT_DIR, profile["name"] + ".json")
        with open(path, "w") as f:
            json.dump(profile, f, indent=1)
            f.write("\n")
        total = sum(l["param_count"] for l in profile["layers"])
        nconv = sum(1 for l in profile["layers"] if l["kind"] != "NonParam")
        print(f"{profile['name']}: {len(profile['layers'])} layers "
              f"({nconv} parameterized), {total:,} params")


if __name__ == "__main__":
    main()
