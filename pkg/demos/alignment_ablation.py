"""
Why alignment matters: a small ablation
=======================================

Compare the full model (deformable lateral and output layers, concatenation
fusion, embeddings from the aggregated map) with a baseline that uses plain
lateral convolutions, sum fusion and embeddings from the regression tower,
and the OIM loss alone against OIM plus triplet. ``DEMO_STEPS`` shortens each
run; the full desk schedule gives the clearest separation.
"""
import os
from pathlib import Path

from alignps import run_ablation, shipped_config
from alignps.trainer import median_by_method, synthetic_data

out = Path(os.environ.get("DEMO_OUT", "."))
cfg = shipped_config("desk")
steps = os.environ.get("DEMO_STEPS")
if steps:
    cfg = cfg.replace(**{"train.max_steps": int(steps)})
data = synthetic_data(cfg)
cache = {}

for preset in ("baseline", "loss"):
    print(preset)
    results = run_ablation(preset, cfg, seeds=(0,), out_csv=out / f"{preset}.csv", data=data, cache=cache)
    for name, m in median_by_method(results).items():
        print(f"  {name:<14} recall {m['recall']:.3f} mAP {m['map']:.3f} top-1 {m['top1']:.3f}")
