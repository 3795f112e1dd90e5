"""The whole experiment on a reduced schedule, with the ablation summary printed.

Run: python3 demos/03_full_pipeline.py [run_dir]
The default schedule (what the acceptance tests use) takes about two minutes;
this demo shortens it to finish in well under a minute.
"""
import sys
import tempfile
from pathlib import Path

from langembed import pipeline
from langembed.config import TrainConfig

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="langembed_"))
config = TrainConfig(train_per_speaker=25, encoder_steps=500, stage1_steps=1000, stage2_steps=300)
reports = pipeline.run_all(config, pipeline.RunDir(out))

print((out / "eval" / "summary.md").read_text())
for cond, r in reports.items():
    print(f"{cond:18s} speaker probe {r['speaker_probe_accuracy']:.3f}  "
          f"silhouette {r['silhouette_by_language']['embedding']:.3f}")
print("plots:", sorted(p.name for p in (out / "eval" / "plots").glob("*.svg")))
print("run directory:", out)
