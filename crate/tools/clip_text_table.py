"""Writes a prompt -> text-embedding table for a CLIP checkpoint.

usage: clip_text_table.py MODEL_DIR OUT.json PROMPT [PROMPT ...]

Existing entries in OUT.json are kept, so prompts can be added over time.
"""
import json
import sys
from pathlib import Path

import torch
from transformers import CLIPModel, CLIPTokenizer


def main():
    model_dir, out, prompts = sys.argv[1], Path(sys.argv[2]), sys.argv[3:]
    table = json.loads(out.read_text()) if out.exists() else {}
    model = CLIPModel.from_pretrained(model_dir).eval()
    tok = CLIPTokenizer.from_pretrained(model_dir)
    with torch.no_grad():
        batch = tok(prompts, padding=True, return_tensors="pt")
        feats = model.get_text_features(**batch)
        feats = getattr(feats, "pooler_output", feats)
    for p, v in zip(prompts, feats):
        table[p.strip()] = v.double().tolist()
    out.write_text(json.dumps(table))


if __name__ == "__main__":
    main()
