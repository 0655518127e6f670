#!/usr/bin/env python3
"""Writes tiny parity fixtures: a random ViT in LGTC form plus reference
forward outputs computed here with numpy.

Each file carries the model tensors and three extra tensors:
  parity.input   [3, S, S]  normalized input
  parity.tokens  [N, d]     final-layer tokens Z^L
  parity.logits  [C]        scores of the first classifier

Also writes golden_input.png, the image used for the CLI golden files, and
a SHA256SUMS covering every file in the output directory.

Usage: make_parity_fixture.py [--out fixtures] [--seed 0]
"""

import argparse
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

ALIGN = 64


def align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_lgtc(path, tensors, metadata):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dtype = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}[arr.dtype]
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append((offset, raw))
        offset = align(offset + len(raw))
    header = {"format": "LGTC", "version": 1, "payload_bytes": offset, "tensors": entries, "metadata": metadata}
    text = json.dumps(header, separators=(",", ":")).encode()
    start = align(16 + len(text))
    out = bytearray(start + offset)
    out[0:4] = b"LGTC"
    out[4:8] = struct.pack("<I", 1)
    out[8:16] = struct.pack("<Q", len(text))
    out[16 : 16 + len(text)] = text
    for off, raw in blobs:
        out[start + off : start + off + len(raw)] = raw
    Path(path).write_bytes(bytes(out))


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build(seed, pooling):
    rng = np.random.default_rng(seed)
    L, h, d, p, S, ratio, classes, e = 3, 2, 16, 4, 16, 4.0, 5, 12
    m = int(round(d * ratio))
    n = (S // p) ** 2
    cls = pooling == "cls_token"
    N = n + (1 if cls else 0)
    sc = 1.0 / math.sqrt(d)

    def u(shape, scale=sc, offset=0.0):
        return offset + scale * rng.uniform(-1.0, 1.0, size=shape)

    t = {}
    t["patch_embed.weight"] = u((3 * p * p, d))
    t["patch_embed.bias"] = u((d,))
    if cls:
        t["cls_token"] = u((d,), 1.0)
    t["pos_embed"] = u((N, d), 1.0)
    for i in range(L):
        b = f"blocks.{i}"
        t[b + ".ln1.weight"] = u((d,), 0.1, 1.0)
        t[b + ".ln1.bias"] = u((d,), 0.1)
        t[b + ".attn.qkv.weight"] = u((d, 3 * d), 2 * sc)
        t[b + ".attn.qkv.bias"] = u((3 * d,))
        t[b + ".attn.proj.weight"] = u((d, d))
        t[b + ".attn.proj.bias"] = u((d,))
        t[b + ".ln2.weight"] = u((d,), 0.1, 1.0)
        t[b + ".ln2.bias"] = u((d,), 0.1)
        t[b + ".mlp.fc1.weight"] = u((d, m))
        t[b + ".mlp.fc1.bias"] = u((m,))
        t[b + ".mlp.fc2.weight"] = u((m, d))
        t[b + ".mlp.fc2.bias"] = u((d,))
    t["ln_final.weight"] = u((d,), 0.1, 1.0)
    t["ln_final.bias"] = u((d,), 0.1)
    if not cls:
        t["pool.query"] = u((d,), 1.0)
        t["pool.key.weight"] = u((d, d), 2 * sc)
        t["pool.value.weight"] = u((d, d))
        t["pool.out.weight"] = u((d, d))
        t["pool.out.bias"] = u((d,))
    t["proj"] = u((d, e))
    W = u((e, classes), 1.0)
    t["classifier.text.weight"] = W / np.linalg.norm(W, axis=0, keepdims=True)
    v = u((e,), 1.0)
    t["embedding.empty"] = v / np.linalg.norm(v)
    cfg = {"layers": L, "heads": h, "width": d, "patch_size": p, "image_size": S, "mlp_ratio": ratio,
           "pooling": pooling, "class_token": cls, "gelu": "tanh", "ln_eps": 1e-5}
    return t, cfg, classes


def forward(t, cfg, x):
    L, h, d, p, S = cfg["layers"], cfg["heads"], cfg["width"], cfg["patch_size"], cfg["image_size"]
    eps, g, dh = cfg["ln_eps"], S // p, d // h
    patches = x.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
    z = patches @ t["patch_embed.weight"] + t["patch_embed.bias"]
    if cfg["class_token"]:
        z = np.vstack([t["cls_token"][None, :], z])
    z = z + t["pos_embed"]
    for i in range(L):
        b = f"blocks.{i}"
        y = layer_norm(z, t[b + ".ln1.weight"], t[b + ".ln1.bias"], eps)
        qkv = y @ t[b + ".attn.qkv.weight"] + t[b + ".attn.qkv.bias"]
        q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        heads = []
        for j in range(h):
            s = slice(j * dh, (j + 1) * dh)
            a = softmax(q[:, s] @ k[:, s].T / math.sqrt(dh))
            heads.append(a @ v[:, s])
        z = z + np.hstack(heads) @ t[b + ".attn.proj.weight"] + t[b + ".attn.proj.bias"]
        y = layer_norm(z, t[b + ".ln2.weight"], t[b + ".ln2.bias"], eps)
        z = z + gelu_tanh(y @ t[b + ".mlp.fc1.weight"] + t[b + ".mlp.fc1.bias"]) @ t[b + ".mlp.fc2.weight"] + t[b + ".mlp.fc2.bias"]
    if cfg["pooling"] == "cls_token":
        pooled = layer_norm(z[0], t["ln_final.weight"], t["ln_final.bias"], eps)
    else:
        zn = layer_norm(z, t["ln_final.weight"], t["ln_final.bias"], eps)
        K, V = zn @ t["pool.key.weight"], zn @ t["pool.value.weight"]
        parts = []
        for j in range(h):
            s = slice(j * dh, (j + 1) * dh)
            a = softmax(t["pool.query"][s] @ K[:, s].T / math.sqrt(dh))
            parts.append(a @ V[:, s])
        pooled = np.concatenate(parts) @ t["pool.out.weight"] + t["pool.out.bias"]
    emb = pooled @ t["proj"]
    u = emb / np.linalg.norm(emb)
    return z, u @ t["classifier.text.weight"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for pooling, tag in (("cls_token", "cls"), ("attn_pooler", "pool")):
        t, cfg, classes = build(args.seed, pooling)
        x = np.random.default_rng(args.seed + 1).uniform(-1.0, 1.0, size=(3, cfg["image_size"], cfg["image_size"]))
        for dtype, suffix in ((np.float64, "f64"), (np.float32, "f32")):
            stored = {k: v.astype(dtype) for k, v in t.items()}
            xin = x.astype(dtype)
            # Reference forward in float64 on the stored (possibly rounded) values.
            z, logits = forward({k: v.astype(np.float64) for k, v in stored.items()}, cfg, xin.astype(np.float64))
            meta = {
                "config": cfg,
                "preprocess": {"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25], "resize": "bilinear", "crop": "center"},
                "provenance": f"parity fixture seed={args.seed} pooling={pooling} dtype={suffix}",
                "classifiers": [{"name": "text", "kind": "text_embeddings", "labels": [f"class{i}" for i in range(classes)]}],
                "embeddings": [{"name": "empty", "prompt": "a photo of"}],
                "patch_order": "row-major",
                "weight_layout": "in_out",
            }
            tensors = list(stored.items()) + [("parity.input", xin), ("parity.tokens", z), ("parity.logits", logits)]
            name = f"parity_{tag}_{suffix}.lgtc"
            write_lgtc(out / name, tensors, meta)
    pixels = np.random.default_rng(args.seed + 2).integers(0, 256, size=(24, 32, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(out / "golden_input.png")
    write_checksums(out)


def write_checksums(out):
    names = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "SHA256SUMS")
    sums = [f"{hashlib.sha256((out / n).read_bytes()).hexdigest()}  {n}" for n in names]
    (out / "SHA256SUMS").write_text("\n".join(sums) + "\n")
    print("\n".join(sums))


if __name__ == "__main__":
    main()
