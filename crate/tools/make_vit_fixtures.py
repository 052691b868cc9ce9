"""Builds the tiny ViT / CLIP-vision fixtures used by the adapter tests.

Writes random-weight checkpoints plus reference outputs and input
gradients computed by transformers in float64.
"""
import json
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file
from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection, ViTConfig, ViTModel

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
SIZE, PATCH, DIM, HEADS, DEPTH, MLP, KEY_LAYER = 32, 8, 16, 2, 3, 32, 2
MEAN, STD = [0.48, 0.45, 0.40], [0.26, 0.25, 0.27]

LEGACY = {
    "layers.": "encoder.layer.",
    "attention.q_proj": "attention.attention.query",
    "attention.k_proj": "attention.attention.key",
    "attention.v_proj": "attention.attention.value",
    "attention.o_proj": "attention.output.dense",
    "mlp.fc1": "intermediate.dense",
    "mlp.fc2": "output.dense",
}


def randomise(model, g):
    with torch.no_grad():
        for name, p in model.named_parameters():
            scale = 0.3 if p.dim() > 1 else 0.1
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
            if "norm" in name and name.endswith("weight"):
                p.add_(1.0)


def reference(model, key_module, x, cls_fn, g):
    model = model.double().eval()
    keys = {}
    hook = key_module.register_forward_hook(lambda m, i, o: keys.setdefault("k", o))
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    unit = (xt + 1) / 2
    mean = torch.tensor(MEAN, dtype=torch.float64)
    std = torch.tensor(STD, dtype=torch.float64)
    pixels = ((unit - mean) / std).permute(2, 0, 1).unsqueeze(0)
    out = model(pixel_values=pixels)
    hook.remove()
    k = keys["k"][0, 1:, :]
    c = cls_fn(out)[0]
    rk = torch.randn(k.shape, generator=g, dtype=torch.float64)
    rc = torch.randn(c.shape, generator=g, dtype=torch.float64)
    (k * rk).sum().add((c * rc).sum()).backward()
    return {
        "keys": k.detach().reshape(-1).tolist(),
        "keys_shape": list(k.shape),
        "out": c.detach().tolist(),
        "d_keys": rk.reshape(-1).tolist(),
        "d_out": rc.tolist(),
        "grad": xt.grad.reshape(-1).tolist(),
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    g = torch.Generator().manual_seed(7)
    x = (torch.rand((SIZE, SIZE, 3), generator=g, dtype=torch.float64) * 2 - 1).tolist()

    vit_cfg = ViTConfig(image_size=SIZE, patch_size=PATCH, hidden_size=DIM, num_hidden_layers=DEPTH,
                        num_attention_heads=HEADS, intermediate_size=MLP, layer_norm_eps=1e-6)
    vit = ViTModel(vit_cfg, add_pooling_layer=False)
    randomise(vit, g)
    state = {k: v.contiguous() for k, v in vit.state_dict().items()}
    save_file(state, OUT / "vit_tiny.safetensors")
    legacy = {}
    for k, v in state.items():
        for a, b in LEGACY.items():
            k = k.replace(a, b)
        legacy["vit." + k] = v
    save_file(legacy, OUT / "vit_tiny_legacy.safetensors")
    vit_ref = reference(vit, vit.layers[KEY_LAYER - 1].attention.k_proj, x,
                        lambda o: o.last_hidden_state[:, 0], g)

    clip_cfg = CLIPVisionConfig(image_size=SIZE, patch_size=PATCH, hidden_size=DIM, num_hidden_layers=DEPTH,
                                num_attention_heads=HEADS, intermediate_size=MLP, projection_dim=12)
    clip = CLIPVisionModelWithProjection(clip_cfg)
    randomise(clip, g)
    save_file({k: v.contiguous() for k, v in clip.state_dict().items()}, OUT / "clip_tiny.safetensors")
    clip_ref = reference(clip, clip.vision_model.encoder.layers[KEY_LAYER - 1].self_attn.k_proj, x,
                         lambda o: o.image_embeds, g)

    texts = {p: torch.randn(12, generator=g).tolist() for p in ["a red shape", "a blue shape"]}
    (OUT / "clip_tiny_text.json").write_text(json.dumps(texts))
    (OUT / "vit_reference.json").write_text(json.dumps({
        "image": [v for row in x for px in row for v in px],
        "size": SIZE, "key_layer": KEY_LAYER, "vit": vit_ref, "clip": clip_ref,
    }))


if __name__ == "__main__":
    main()
