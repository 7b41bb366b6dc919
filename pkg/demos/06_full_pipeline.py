# End to end on the miniature profile: pretrain, fusion training,
# per-arrangement adapters, joint fine-tuning, evaluation, report.
# Equivalent CLI: promptgrid all --config configs/tiny.cfg

import json
from pathlib import Path

from promptgrid.config import load_config
from promptgrid.pipeline import RunPaths, run

repo = Path(__file__).resolve().parent.parent
out = Path(__file__).parent / "output" / "tiny-run"

cfg = load_config(repo / "configs" / "tiny.cfg", overrides={"run.out": str(out)})
run("all", cfg)

paths = RunPaths(out)
ledger = json.loads(paths.ledger.read_text())
print("stage timings:")
for stage, entry in ledger["stages"].items():
    print(f"  {stage:10s} {entry['wall_time_s']:8.1f}s  "
          f"peak mem {entry['peak_mem_kb'] / 1024:.0f} MB")

print("\narrangement ranking (stage 2):",
      ledger["stages"]["stage2"]["preferred"])
print("best arrangement (stage 3):",
      ledger["stages"]["stage3"]["best_arrangement"])
for name, metric in ledger["metrics"].items():
    print(f"{name}: {metric['metric']} = {metric['mean']:.4f} "
          f"+/- {metric['stderr']:.4f}")
print(f"\nfull report: {paths.metrics / 'report.txt'}")
print(f"qualitative sheet: {paths.figures / 'qualitative.png'}")
