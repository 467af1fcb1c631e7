"""Train the assessor on a small synthetic set and evaluate it.

Short run for demonstration (a few minutes on CPU); the acceptance suite runs
the full-size benchmark. Predicted MOS comes from the expectation over rating
levels under the prototype-cosine likelihoods; training jointly optimizes the
MSE, rating-alignment (KL), and attention-alignment (Frobenius) objectives.
"""

import tempfile
from pathlib import Path

from natiqa import loading, metrics, synthetic
from natiqa.data import load_manifest
from natiqa.model import load_checkpoint
from natiqa.training import model_scorer, train

root = Path(tempfile.mkdtemp(prefix="natiqa_demo_"))
synthetic.generate(synthetic.SynthConfig(count=600, seed=5), root / "data")
manifest = load_manifest(root / "data" / "manifest.json")

# The attention objective costs a couple thousand optimizer steps before the
# score breaks through; 40 epochs x 60 steps is a few minutes on CPU.
config = synthetic.benchmark_train_config(epochs=40, seed=0)
print(f"training {config.epochs} epochs on {len(manifest.split_ids('train'))} samples "
      f"(lambda={config.weights.lam}, gamma={config.weights.gamma}) ...")
result = train(config, manifest, root / "run", verbose=True)

model, meta = load_checkpoint(result.best_checkpoint or result.final_checkpoint)
test_samples = loading.load_samples(manifest, "test")
report = metrics.evaluate(model_scorer(model), test_samples)
print("\ntest report:")
print(report.to_table())
