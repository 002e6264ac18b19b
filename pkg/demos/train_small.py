"""Generate a small synthetic dataset, train the toy CBAM model for a few
epochs and report per-magnification metrics.

Usage: python demos/train_small.py [work_dir]
"""
import sys
from pathlib import Path

from histoattn.backbone import ModelConfig, build_model
from histoattn.data import ImageSet, generate_synthetic, scan_dataset, split_stratified
from histoattn.metrics import evaluate
from histoattn.preprocess import PreprocessConfig
from histoattn.training import TrainConfig, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_train")
generate_synthetic(work / "data", n_per_class=10, size=(64, 64), seed=0)
m = split_stratified(scan_dataset(work / "data"), (0.6, 0.2, 0.2), seed=0)
print({s: len(m.select(s)) for s in ("train", "val", "test")})

pre = PreprocessConfig(target_size=(48, 48), clahe_tiles=(4, 4))
train_set = ImageSet(m.select("train"), pre)
val_set = ImageSet(m.select("val"), pre, augment_train=False)
model = build_model(ModelConfig(in_channels=1, attention="cbam", seed=0))
print("parameters", model.parameter_count)

model, log = train(model, train_set, val_set, TrainConfig(max_epochs=25, batch_size=8, learning_rate=0.003),
                   log_fn=lambda r: print(f"epoch {r.epoch:2d} train {r.train_loss:.3f} "
                                          f"val {r.val_loss:.3f} acc {r.val_acc:.3f}"))
print("best epoch", log.best_epoch)

report = evaluate(model, m.select("test"), pre)
for mag, r in [*report.per_magnification.items(), ("all", report.overall)]:
    auc = "n/a" if r.auc is None else f"{r.auc:.3f}"
    print(f"{mag:>5} n={r.n:3d} acc {r.accuracy:.3f} f1 {r.f1:.3f} auc {auc}")
