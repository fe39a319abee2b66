from evkd.dataset import load_manifest, validate_dataset
from evkd.metrics import aggregate, attribute_breakdown, evaluate_runs
from evkd.plotting import plot_attribute_sr, plot_curves, save_figure

dataset = "data/EventVOT"
results = "data/results/student"
## CHECK THE DATASET FIRST
manifest = load_manifest(dataset)
findings = validate_dataset(manifest)
if len(findings):
    print(findings.groupby("kind").size())
runs, skipped = evaluate_runs(results, manifest, split="test")
report = aggregate(runs, workers=8)
print(report.as_frame())
fig, axs = plot_curves(report)
save_figure(fig, "data/curves.svg")
fig, ax = plot_attribute_sr(attribute_breakdown(runs))
save_figure(fig, "data/attributes.svg")
