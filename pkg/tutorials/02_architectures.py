"""
Bottleneck ResNets for 15 labels
================================

Shapes can be traced without running any arithmetic, which makes it cheap to
inspect full-size networks.
"""

# %%
import numpy as np

from cxrnet import ModelConfig, ResNet, build_meta_mlp, build_probe

# %% [markdown]
# ResNet-50 on a 224 x 224 single-channel image.

# %%
net = ResNet(ModelConfig(depth=50), seed=0)
for name, shape in net.trace_shapes():
    if name.endswith(".0") or "." not in name:
        print(f"{name:10s} {shape}")
print("blocks per stage:", net.block_counts())

# %% [markdown]
# Named variants. The large input gets an extra pooling step after the first
# stage so the last stage still ends at 7 x 7.

# %%
for variant in ("resnet38-large-meta", "resnet101-large", "resnet50-ots"):
    cfg = ModelConfig.variant(variant)
    last = dict(ResNet(cfg, 0).trace_shapes())["pooling2"]
    print(f"{variant:22s} input {cfg.input_size} channels {cfg.input_channels} meta {cfg.use_meta} "
          f"freeze {cfg.freeze!r} features {last[0]}")

# %% [markdown]
# ``width`` shrinks every stage, which is what makes CPU experiments feasible.
# With meta fusion, age, gender and view are appended to the pooled features.

# %%
tiny = ResNet(ModelConfig(depth=38, width=4, input_size=64, use_meta=True), seed=0)
x = np.random.default_rng(0).random((3, 1, 64, 64)).astype(np.float32)
meta = np.array([[0.4, 1, 0], [0.7, 0, 1], [0.1, 1, 1]], np.float32)
probs = tiny.forward(x, meta, training=True).data
print("probabilities", probs.shape, float(probs.min()), float(probs.max()))

# %% [markdown]
# Two companions: an MLP that sees only the three non-image values, and a
# probe that freezes a trained base and predicts one of them from image features.

# %%
mlp = build_meta_mlp(seed=0)
print("MLP output", mlp.forward(None, meta).shape)
probe = build_probe(ResNet(ModelConfig(depth=38, width=4, input_size=64), 0), "view")
print("probe trains:", sorted(probe.trainable_parameters()))
