"""Train a tiny sparse forecaster on synthetic tones and plot its forecast.

About a minute on a laptop CPU. Writes forecast.csv (and loss_curve.svg when
matplotlib is available) into the working directory.

Run:  python3 demos/train_tiny_forecaster.py
"""

import tempfile

import numpy as np

from sparsecast.data import write_csv
from sparsecast.heads import autoregressive_forecast
from sparsecast.model import Forecaster, ModelConfig
from sparsecast.synthetic import build_tone_store, multi_tone
from sparsecast.train import TrainConfig, train_loop

config = ModelConfig(num_layers=1, num_heads=2, num_experts=4, top_k=2, d_model=16,
                     d_ff=32, d_expert=16, head_horizons=(1, 4, 16), max_context=256)
model = Forecaster.init(config, seed=0)
print(f"model: {config.num_layers} layers, {config.num_experts} experts "
      f"(top-{config.top_k}), d_model={config.d_model}")

with tempfile.TemporaryDirectory() as tmp:
    store = build_tone_store(tmp, np.random.default_rng(1), num_sequences=6,
                             length=512, periods=(8,))
    train = TrainConfig(steps=400, batch=4, context=64, lr=1.5e-2, warmup_steps=10,
                        alpha=0.02, seed=0)
    print(f"training {train.steps} steps on {len(store)} tone sequences...")
    metrics = train_loop(model, store, train)

first = np.mean([m["loss"] for m in metrics[:10]])
last = np.mean([m["loss"] for m in metrics[-10:]])
print(f"loss: {first:.4f} -> {last:.4f}")
print(f"expert selection fractions at the end: "
      f"min {metrics[-1]['f_min']:.3f}, max {metrics[-1]['f_max']:.3f}")

# Evaluate at the trained context length; rotary positions are only
# exercised up to the row lengths seen in training.
rng = np.random.default_rng(99)
series = multi_tone(rng, 128, periods=(8,))
context, target = series[:64], series[64:128]
forecast = autoregressive_forecast(model, context, 64)
err = float(np.mean((forecast - target) ** 2))
naive = float(np.mean((context[-1] - target) ** 2))
print(f"held-out horizon-64 MSE: model {err:.4f} vs last-value {naive:.4f}")

write_csv("forecast.csv", np.stack([target, forecast], axis=1),
          ["target", "forecast"])
print("wrote forecast.csv")

try:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.2))
    ax1.plot([m["loss"] for m in metrics])
    ax1.set_title("training loss")
    ax1.set_xlabel("step")
    ax2.plot(range(64), context, label="context")
    ax2.plot(range(64, 128), target, label="target")
    ax2.plot(range(64, 128), forecast, "--", label="forecast")
    ax2.set_title("held-out rollout")
    ax2.legend()
    fig.tight_layout()
    fig.savefig("loss_curve.svg")
    print("wrote loss_curve.svg")
except ImportError:
    print("matplotlib not installed; skipped loss_curve.svg")
