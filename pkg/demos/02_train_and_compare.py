"""Train a small matcher for a few hundred steps and compare it with mutual-NN.

    python3 demos/02_train_and_compare.py [steps] [checkpoint]

The full protocol (2000 steps, C=32, three layers) lives in the acceptance
tests and takes several minutes; the default here is a quick look.
"""
import logging
import sys
import time

from scenematch.evaluation import evaluate_baseline, evaluate_model
from scenematch.synth import PairConfig, SyntheticDataset
from scenematch.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = sys.argv[2] if len(sys.argv) > 2 else "demo.ckpt"

cfg = TrainConfig(C=32, layers=2, total_steps=steps, warmup_steps=max(1, steps // 20))
pairs = PairConfig()
data = SyntheticDataset(pairs, seed=0, count=steps * cfg.batch_size)

start = time.perf_counter()
ckpt, rows = train(cfg, data, checkpoint_path=out)
print(f"trained {steps} steps in {time.perf_counter() - start:.0f}s; "
      f"loss {rows[0]['loss']:.3f} -> {rows[-1]['loss']:.3f}")

# Held-out pairs come from a seed the training stream never touches.
held = SyntheticDataset(pairs, seed=10_000, count=50)
held = [held[i] for i in range(len(held))]
model = evaluate_model(ckpt.params, cfg.model_config(), held)
mnn = evaluate_baseline("mnn", held)
for name, r in (("model", model), ("mutual-NN", mnn)):
    print(f"{name:>10}: precision {r.precision:.3f} recall {r.recall:.3f} F1 {r.f1:.3f} "
          f"AUC@10px {r.homography_auc_10px:.3f}")
print(f"visibility accuracy {model.visibility_accuracy:.3f}")
print(f"checkpoint in {out}; try demos/03_visibility.py {out}")
