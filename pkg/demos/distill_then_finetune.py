"""Distill a tiny encoder from synthetic teacher prefixes, then fine-tune it on a few labels.

Run with ``python demos/distill_then_finetune.py``; takes about three minutes on one CPU core.
"""
from pointdistill.model import ModelConfig
from pointdistill.training import (FinetuneConfig, TrainConfig, evaluate, finetune_classify,
                                   generate_dataset, pretrain, teacher_for)

cfg = ModelConfig.tiny()

# 64 unlabelled clouds, each paired with a class-structured pseudo-teacher prefix
unlabeled = generate_dataset(4, 16, cfg.num_points, seed=100)
teacher = teacher_for(unlabeled, cfg.prefix_len, cfg.teacher_dim, noise_scale=0.1, seed=100)

pre = pretrain(unlabeled, cfg, TrainConfig(epochs=100, warmup_epochs=10), teacher=teacher,
               on_record=lambda r: r["epoch"] % 20 == 0 and print(f"epoch {r['epoch']:3d}  "
                                                                  f"distill {r['loss']['distill']:.5f}"))
first, last = pre.step_losses[0]["distill"], pre.step_losses[-1]["distill"]
print(f"distill loss {first:.5f} -> {last:.5f} ({last / first:.1%} of the start)")

# 8 labels per class; both runs see the same batches, only the encoder init differs
train = generate_dataset(4, 8, cfg.num_points, seed=200, id_offset=1000)
test = generate_dataset(4, 16, cfg.num_points, seed=300, id_offset=2000)
fc = FinetuneConfig()  # lr 5e-4, 300 epochs, warmup 10, batch 32
scratch = finetune_classify(train, cfg, fc, num_classes=4)
distilled = finetune_classify(train, cfg, fc, init=pre.checkpoint, num_classes=4)
assert scratch.order_hash == distilled.order_hash
print(f"test accuracy  scratch {evaluate(scratch.model, test)['accuracy']:.3f}  "
      f"distilled {evaluate(distilled.model, test)['accuracy']:.3f}")
