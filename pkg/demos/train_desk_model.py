"""
Training and searching on synthetic scenes
==========================================

Generate a small synthetic person-search split, train the desk-scale model,
measure detection and search quality, sweep the gallery size and finally
search for one query person. ``DEMO_STEPS`` shortens training (the full desk
schedule is 600 steps, about five minutes on one core).
"""
import os
from pathlib import Path

from alignps import BoundingBox, Trainer, iou, evaluate_detection, evaluate_search, gallery_sweep, shipped_config
from alignps.trainer import synthetic_data

out = Path(os.environ.get("DEMO_OUT", "."))
cfg = shipped_config("desk")
steps = os.environ.get("DEMO_STEPS")
if steps:
    cfg = cfg.replace(**{"train.max_steps": int(steps)})

train, test = synthetic_data(cfg)
print(f"{len(train.manifest.images)} training scenes, {train.manifest.labeled_identity_count} identities, "
      f"{len(test.manifest.queries)} queries")

trainer = Trainer(cfg, train.scenes(), train.manifest.labeled_identity_count)
history = trainer.fit(log_path=out / "metrics.jsonl")
print(f"{len(history)} steps, loss {history[0]['loss']:.2f} -> {history[-1]['loss']:.2f}")

preds = trainer.predict(test.manifest, test.images)
recall, ap = evaluate_detection(test.manifest, preds)
mAP, top1, _ = evaluate_search(test.manifest, preds)
print(f"detection recall {recall:.3f}  AP {ap:.3f}")
print(f"search mAP {mAP:.3f}  top-1 {top1:.3f}")

# smaller galleries are easier: fewer distractors compete with the true matches
rows = gallery_sweep(test.manifest, preds, [10, 20, 49], out_csv=out / "gallery_sweep.csv",
                     chart=out / "gallery_sweep.png")
for r in rows:
    print(f"gallery {r['gallery_size']:>3}: mAP {r['map']:.3f} top-1 {r['top1']:.3f}")

# one query, ranked against every detection in the other test images
q = test.manifest.queries[0]
maps, sx, sy, _ = trainer.image_maps(test.images[q.image])
emb = trainer.query_embedding(maps, BoundingBox(*q.bbox), sx, sy)
ranked = []
for rec in test.manifest.images:
    if rec.file == q.image:
        continue
    m, gx, gy, t = trainer.image_maps(test.images[rec.file])
    ranked += [(float(d.embedding @ emb), rec, d.box) for d in trainer.detect(m, t, gx, gy)]
ranked.sort(key=lambda r: -r[0])
print(f"query identity {q.identity}; top matches:")
for sim, rec, box in ranked[:5]:
    hit = any(p.identity == q.identity and iou(box, BoundingBox(*p.bbox)) >= 0.5 for p in rec.persons)
    print(f"  {rec.file} {[round(v) for v in box.as_list()]} sim {sim:.3f}{'  <- same person' if hit else ''}")
trainer.save(out / "checkpoint.npz")
