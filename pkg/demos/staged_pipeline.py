"""
Sparsifying a network one layer at a time
=========================================

A plan lists layers from the output end toward the input, each with the
fraction S of weights to keep. Stage m masks one more layer of N_{m-1},
copies the surviving weights into N_m and retrains with every mask so far
held fixed. A checkpoint is written after each stage.
"""
import tempfile
from pathlib import Path

from sparsenet import SparsityPlan, TrainConfig, desk_spec, run_from_scratch_control, run_pipeline
from sparsenet.checkpoint import load_checkpoint
from sparsenet.data import Dataset, synthetic_shapes

spec = desk_spec()
X, y = synthetic_shapes(3000, image_hw=spec.input_shape[:2], seed=0)
data = Dataset.split(X, y, seed=0)
cfg = TrainConfig(steps_baseline=700, steps_retrain=350, seed=0)
plan = SparsityPlan.parse("f:1/16,5b:1/8")
plan.validate(spec)  # order, known layers and S*K >= 1 are checked up front

out = Path(tempfile.mkdtemp())
res = run_pipeline(spec, plan, data, cfg, out_dir=out)
for rec in res.records:
    extra = f"  selected |r| {rec.corr_before:.3f} -> {rec.corr_after:.3f}" if rec.corr_before else ""
    print(f"N{rec.stage} {rec.layer or 'dense':>5}: train {rec.train_acc:.3f} test {rec.eval_acc:.3f} "
          f"ratio {rec.compression_ratio:.3f}{extra}")
print(sorted(p.name for p in out.iterdir()))

# %%
# Checkpoints hold float32 weights plus one bit per weight for each mask.
net, masks = load_checkpoint(out / "N2.spcn", spec)
print("stage", net.stage, "masks", {k: f"{m.kept}/{m.bits.size}" for k, m in masks.items()})

# %%
# The control: same final masks, fresh weights, the combined step budget.
_, scratch = run_from_scratch_control(spec, res.masks, data, cfg)
print(f"from scratch: train {scratch.train_acc:.3f} test {scratch.eval_acc:.3f}")
