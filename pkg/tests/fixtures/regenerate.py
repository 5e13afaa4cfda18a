"""Rebuilds the golden files in this directory.

Run only when a format change is intended; the tests compare fresh output
against the committed bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch

from crft import tasks
from crft.info_flow import CrftConfig, attention_grid
from crft.intervention import init_params
from crft.io import export_heatmap, save_checkpoint
from crft.model import MicroTransformer, ModelConfig, greedy_decode

HERE = Path(__file__).parent
PROMPT = [tasks.BOS, 3, tasks.PLUS0 + 5, tasks.MINUS0 + 2, tasks.PLUS0 + 7, tasks.FILLER0 + 1, tasks.EQ]


def golden_model() -> MicroTransformer:
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=tasks.VOCAB_SIZE, max_seq=24)
    model = MicroTransformer(cfg, seed=11)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(25.0)
    model.step = 7
    return model


def golden_params():
    return init_params(8, 2, [0, 1], (0, 1), seed=5)


def golden_crft_config() -> CrftConfig:
    return CrftConfig(rank=2, k_int=3, segment_grouping=True)


def golden_grid():
    with torch.no_grad():
        return attention_grid(golden_model().run(torch.tensor([PROMPT])), 1)


def main() -> None:
    torch.set_num_threads(1)
    model = golden_model()
    save_checkpoint(HERE / "tiny_model.ckpt", model)
    save_checkpoint(HERE / "tiny_interventions.ckpt", golden_params(), golden_crft_config())
    export_heatmap(golden_grid(), HERE / "heatmap.csv", "csv")
    export_heatmap(golden_grid(), HERE / "heatmap.pgm", "pgm")
    out = greedy_decode(model, PROMPT, 12)
    (HERE / "decode.json").write_text(json.dumps({"prompt": PROMPT, "output": out}) + "\n")


if __name__ == "__main__":
    main()
