"""Regenerates the reference fixtures used by the C++ tests.

Each fixture comes from an independent implementation (nibabel, numpy,
scikit-image, torch), never from this project's code.

    python3 tests/fixtures/make_fixtures.py
"""
import gzip
import json
import pathlib
import struct

import nibabel as nib
import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import save_file
from skimage.segmentation import felzenszwalb

HERE = pathlib.Path(__file__).parent
rng = np.random.default_rng(1234)


def nifti():
    # int16 on disk with scl_slope = 2, scl_inter = -5 (patched into the raw
    # header because nibabel resets scaling on save), gzipped
    data = rng.integers(-300, 300, size=(5, 4, 3)).astype(np.int16)  # x, y, z
    raw = HERE / "scaled_int16.nii"
    nib.save(nib.Nifti1Image(data, np.eye(4)), raw)
    buf = bytearray(raw.read_bytes())
    buf[112:120] = struct.pack("<ff", 2.0, -5.0)
    (HERE / "scaled_int16.nii.gz").write_bytes(gzip.compress(bytes(buf), mtime=0))
    raw.unlink()
    back = nib.load(HERE / "scaled_int16.nii.gz")
    assert (back.dataobj.slope, back.dataobj.inter) == (2.0, -5.0)
    np.save(HERE / "scaled_int16_expected.npy", np.ascontiguousarray(back.get_fdata()))

    data = rng.standard_normal((6, 7, 2)).astype(np.float32)
    nib.save(nib.Nifti1Image(data, np.diag([0.8, 0.9, 2.5, 1])), HERE / "float32.nii")
    np.save(HERE / "float32_expected.npy", data.astype(np.float64))


def npy():
    np.save(HERE / "f4.npy", np.arange(12, dtype=np.float32).reshape(3, 4) / 4)
    np.save(HERE / "i8.npy", np.array([[-3, 7], [1 << 40, 0]], dtype=np.int64))


def superpixels():
    cases = []
    half = np.zeros((24, 32))
    half[:, 16:] = 1.0
    cases.append(("halfplanes", half, dict(scale=100, sigma=0.8, min_size=20)))
    blobs = np.zeros((40, 40))
    yy, xx = np.mgrid[:40, :40]
    blobs[(yy - 12) ** 2 + (xx - 12) ** 2 < 64] = 0.8
    blobs[(yy - 28) ** 2 + (xx - 26) ** 2 < 100] = 0.4
    # numpy's argsort orders equal edge weights arbitrarily; noise removes ties
    blobs += 0.02 * rng.random(blobs.shape)
    cases.append(("blobs", blobs, dict(scale=50, sigma=0.5, min_size=10)))
    out = []
    for name, img, p in cases:
        labels = felzenszwalb(img, scale=p["scale"], sigma=p["sigma"], min_size=p["min_size"])
        np.save(HERE / f"sp_{name}_image.npy", img.astype(np.float64))
        np.save(HERE / f"sp_{name}_labels.npy", labels.astype(np.int32))
        out.append({"name": name, **p})
    (HERE / "superpixels.json").write_text(json.dumps(out, indent=2) + "\n")


def bilinear():
    x = torch.from_numpy(rng.standard_normal((1, 2, 5, 7)))
    for oh, ow in [(9, 4), (3, 3), (10, 14)]:
        y = F.interpolate(x, size=(oh, ow), mode="bilinear", align_corners=False)
        np.save(HERE / f"bilinear_{oh}x{ow}.npy", y[0].numpy())
    np.save(HERE / "bilinear_input.npy", x[0].numpy())


def tiny_vit():
    torch.manual_seed(7)
    D, depth, heads, patch, grid, hidden = 8, 2, 2, 4, 3, 16
    w = {
        "patch_embed.proj.weight": torch.randn(D, 3, patch, patch) * 0.2,
        "patch_embed.proj.bias": torch.randn(D) * 0.1,
        "cls_token": torch.randn(1, 1, D) * 0.5,
        "pos_embed": torch.randn(1, 1 + grid * grid, D) * 0.5,
        "norm.weight": 1 + 0.1 * torch.randn(D),
        "norm.bias": 0.1 * torch.randn(D),
    }
    for i in range(depth):
        b = f"blocks.{i}."
        w[b + "norm1.weight"] = 1 + 0.1 * torch.randn(D)
        w[b + "norm1.bias"] = 0.1 * torch.randn(D)
        w[b + "attn.qkv.weight"] = torch.randn(3 * D, D) * 0.3
        w[b + "attn.qkv.bias"] = torch.randn(3 * D) * 0.1
        w[b + "attn.proj.weight"] = torch.randn(D, D) * 0.3
        w[b + "attn.proj.bias"] = torch.randn(D) * 0.1
        w[b + "ls1.gamma"] = 0.5 + 0.1 * torch.randn(D)
        w[b + "norm2.weight"] = 1 + 0.1 * torch.randn(D)
        w[b + "norm2.bias"] = 0.1 * torch.randn(D)
        w[b + "mlp.fc1.weight"] = torch.randn(hidden, D) * 0.3
        w[b + "mlp.fc1.bias"] = torch.randn(hidden) * 0.1
        w[b + "mlp.fc2.weight"] = torch.randn(D, hidden) * 0.3
        w[b + "mlp.fc2.bias"] = torch.randn(D) * 0.1
        w[b + "ls2.gamma"] = 0.5 + 0.1 * torch.randn(D)
    w = {k: v.double().contiguous() for k, v in w.items()}
    save_file({k: v.float() for k, v in w.items()}, HERE / "tiny_vit.safetensors")
    w = {k: v.float().double() for k, v in w.items()}  # what the file holds

    img = torch.from_numpy(rng.random((18, 22)))  # padded to 20x24 -> 5x6 tokens
    x = img.expand(3, -1, -1).clone()
    x = F.pad(x, (0, 24 - 22, 0, 20 - 18))
    mean = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64)[:, None, None]
    std = torch.tensor([0.229, 0.224, 0.225], dtype=torch.float64)[:, None, None]
    x = (x - mean) / std
    t = F.conv2d(x[None], w["patch_embed.proj.weight"], w["patch_embed.proj.bias"], stride=patch)[0]
    gh, gw = t.shape[1:]
    tokens = t.reshape(D, -1).T
    pos = w["pos_embed"][0]
    pg = pos[1:].T.reshape(1, D, grid, grid)
    pg = F.interpolate(pg, size=(gh, gw), mode="bilinear", align_corners=False)[0].reshape(D, -1).T
    h = torch.cat([w["cls_token"][0] + pos[:1], tokens + pg])
    dh = D // heads
    for i in range(depth):
        b = f"blocks.{i}."
        xn = F.layer_norm(h, (D,), w[b + "norm1.weight"], w[b + "norm1.bias"], eps=1e-6)
        qkv = xn @ w[b + "attn.qkv.weight"].T + w[b + "attn.qkv.bias"]
        q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
        outs = []
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            a = torch.softmax(q[:, sl] @ k[:, sl].T / dh ** 0.5, dim=-1)
            outs.append(a @ v[:, sl])
        m = torch.cat(outs, dim=1) @ w[b + "attn.proj.weight"].T + w[b + "attn.proj.bias"]
        h = h + w[b + "ls1.gamma"] * m
        xn = F.layer_norm(h, (D,), w[b + "norm2.weight"], w[b + "norm2.bias"], eps=1e-6)
        m = F.gelu(xn @ w[b + "mlp.fc1.weight"].T + w[b + "mlp.fc1.bias"])
        m = m @ w[b + "mlp.fc2.weight"].T + w[b + "mlp.fc2.bias"]
        h = h + w[b + "ls2.gamma"] * m
    h = F.layer_norm(h, (D,), w["norm.weight"], w["norm.bias"], eps=1e-6)
    feats = h[1:].T.reshape(D, gh, gw)
    np.save(HERE / "tiny_vit_input.npy", img.numpy())
    np.save(HERE / "tiny_vit_features.npy", feats.numpy())


if __name__ == "__main__":
    nifti()
    npy()
    superpixels()
    bilinear()
    tiny_vit()
    print("fixtures written to", HERE)
