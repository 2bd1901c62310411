"""Look at what a checkpoint believes about visibility on one held-out pair.

    python3 demos/03_visibility.py model.ckpt [out.svg]
"""
import sys

import numpy as np

from scenematch.model import predict
from scenematch.render import side_by_side
from scenematch.synth import PairConfig, generate_pair
from scenematch.training import load_checkpoint
from scenematch.visibility import VISIBLE

ckpt = load_checkpoint(sys.argv[1])
mcfg = ckpt.config.model_config()
pair = generate_pair(PairConfig(scale_dims=mcfg.scale_dims), seed=10_000)
pred = predict(ckpt.params, pair, mcfg)

p_s, p_t = pred.vis_s[:, VISIBLE], pred.vis_t[:, VISIBLE]
labels = np.concatenate([pair.gt.visible_s, pair.gt.visible_t])
probs = np.concatenate([p_s, p_t])
print(f"visibility accuracy on this pair: {np.mean((probs >= 0.5) == labels):.3f}")

# Points the model is least sure about tend to sit near the warped image border.
order = np.argsort(np.abs(p_s - 0.5))[:5]
for i in order:
    u, v, _ = pair.source.positions[i]
    print(f"  source #{i:2d} at ({u:6.1f}, {v:6.1f}): p_visible {p_s[i]:.2f}, label {pair.gt.visible_s[i]}")

truth = {(int(i), int(j)) for i, j in pair.gt.matches}
correct = sum((i, j) in truth for i, j, _ in pred.matches)
print(f"{len(pred.matches)} matches, {correct} correct, {len(truth)} in ground truth")

out = sys.argv[2] if len(sys.argv) > 2 else "visibility.svg"
with open(out, "w") as f:
    f.write(side_by_side(pair.source.positions, pair.source.image_size, pair.target.positions,
                         pair.target.image_size, pred.matches, p_s, p_t, title="predicted visibility"))
print(f"wrote {out}")
