"""Walk through one synthetic image pair and draw its ground truth.

    python3 demos/01_synthetic_pair.py [out.svg]
"""
import sys

import numpy as np

from scenematch.evaluation import baseline_match, raw_descriptors
from scenematch.render import side_by_side
from scenematch.synth import PairConfig, generate_pair

cfg = PairConfig()
pair = generate_pair(cfg, seed=0)
gt = pair.gt

# A pair is two keypoint sets related by a random homography.  Some source
# points fall outside the target image, some were dropped by the "detector",
# and distractors were sprinkled in to pad both sets to a fixed size.
print(f"source {len(pair.source)} keypoints, target {len(pair.target)} keypoints")
print(f"ground-truth matches: {len(gt.matches)}")
print(f"supervised as unmatched: {len(gt.unmatched_s)} source, {len(gt.unmatched_t)} target")
print(f"visible: {int(gt.visible_s.sum())}/{len(gt.visible_s)} source, "
      f"{int(gt.visible_t.sum())}/{len(gt.visible_t)} target")
print("homography:\n", np.array2string(pair.h, precision=4, suppress_small=True))

# Descriptors alone already carry a lot of signal: the mutual nearest
# neighbour on the raw multi-scale features is the reference point the
# learned matcher has to beat.
predicted = baseline_match("mnn", raw_descriptors(pair.source), raw_descriptors(pair.target))
truth = {(int(i), int(j)) for i, j in gt.matches}
hits = sum((i, j) in truth for i, j, _ in predicted)
print(f"mutual-NN on raw features: {len(predicted)} matches, {hits} correct")

out = sys.argv[1] if len(sys.argv) > 1 else "synthetic_pair.svg"
svg = side_by_side(pair.source.positions, pair.source.image_size,
                   pair.target.positions, pair.target.image_size,
                   [(int(i), int(j), 1.0) for i, j in gt.matches],
                   gt.visible_s.astype(float), gt.visible_t.astype(float),
                   title="ground truth (green = visible in the other image)")
with open(out, "w") as f:
    f.write(svg)
print(f"wrote {out}")
