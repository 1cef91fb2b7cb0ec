"""Score encoders from each pre-training mode with a frozen, never-trained decoder.

A lower probe loss means the encoder's tokens are easier for an arbitrary
fixed decoder to turn back into the hidden patches.
Run with ``python demos/probe_ordering.py [seed]``; takes about three minutes.
"""
import sys

from pointdistill.model import ModelConfig
from pointdistill.training import TrainConfig, generate_dataset, pretrain, recon_probe, teacher_for

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ModelConfig.tiny()
ds = generate_dataset(4, 16, cfg.num_points, seed=0)
teacher = teacher_for(ds, cfg.prefix_len, cfg.teacher_dim, 0.1, seed=0)
decoder_seed = 1000 + seed

for mode in ("none", "recon", "distill"):
    tc = TrainConfig(loss=mode, seed=seed, epochs=100, warmup_epochs=10, decoder_seed=decoder_seed)
    res = pretrain(ds, cfg, tc, teacher=teacher if mode == "distill" else None)
    print(f"{mode:8s} probe loss {recon_probe(res.model.encoder, cfg, ds, decoder_seed, mask_seed=7):.5f}")
