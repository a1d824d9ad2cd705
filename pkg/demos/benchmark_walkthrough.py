# %% [markdown]
# Component ablation on the synthetic benchmark
#
# Trains each variant on the pinned split and prints the table the acceptance
# suite checks. Results are cached, so a second run is instant. Shrink the
# split and step count below for a quick look.

# %%
import logging

from lacoste.benchmark import VARIANTS, BenchmarkConfig, run_benchmark

logging.basicConfig(level=logging.INFO)
bench = BenchmarkConfig()  # e.g. BenchmarkConfig(train_clips=20, val_clips=5, steps=200)
results = run_benchmark(bench, cache_dir=".benchmark_cache")  # run from the repository root

# %%
print(f"{'variant':>9}  {'mcIoU':>6}  {'ChIoU':>6}  {'ISIIoU':>6}  {'train s':>7}")
for name in VARIANTS:
    r = results[name]
    print(f"{name:>9}  {100 * r['mcIoU']:6.2f}  {100 * r['Ch_IoU']:6.2f}  {100 * r['ISI_IoU']:6.2f}"
          f"  {r['train_seconds']:7.0f}")

# %%
# Per-query accuracy over matched queries for each classifier and the ensemble.
for name in ("full", "pseudo", "noalign"):
    acc = results[name]["accuracy"]
    print(name, {k: round(v, 1) for k, v in acc.items()})

# %%
# Identity consistency: share of frame transitions where every persisting
# object keeps its query slot.
for name in ("full", "noalign"):
    print(name, results[name]["identity"])
