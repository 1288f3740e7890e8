"""
The command line, end to end
============================

Every step of an experiment is one ``cxrnet`` subcommand reading a flat
config file. Here they run in-process on a throwaway corpus.
"""

# %%
import tempfile
from pathlib import Path

from cxrnet.cli import main
from cxrnet.data import Motif, SynthSpec, synth_dataset, write_corpus

root = Path(tempfile.mkdtemp())
write_corpus(synth_dataset(SynthSpec(n_patients=20, image_size=40, motifs=(Motif(0, radius=6),),
                                     background_rate=0.3), 0), root / "corpus")
(root / "run.cfg").write_text("""\
seed = 0
data.csv = corpus/Data_Entry.csv
data.images = corpus/images
split.resamples = 2
split.tolerance = 0.1
model.depth = 38
model.width = 2
model.input_size = 32
train.batch_size = 8
train.max_epochs = 2
run.tag = tiny
""")


def cxrnet(*args):
    code = main([args[0], "--config", str(root / "run.cfg"), "--out", str(root / "out"), *args[1:]])
    print("cxrnet", " ".join(args), "->", code)


# %% [markdown]
# Split into patient-disjoint re-samples, then train one model per re-sample.

# %%
cxrnet("split")
cxrnet("train", "--resample", "0")
cxrnet("train", "--resample", "1")

# %% [markdown]
# Evaluation writes per-image scores and an AUC table with mean ± std over folds.

# %%
cxrnet("eval")
print((root / "out" / "tiny" / "eval" / "auc.txt").read_text())

# %% [markdown]
# A linear probe asks whether the frozen features encode the view position.

# %%
cxrnet("probe", "--target", "view")
print((root / "out" / "tiny" / "fold0" / "probe_view_metrics.json").read_text())

# %% [markdown]
# Heatmaps for one image.

# %%
image = sorted((root / "corpus" / "images").iterdir())[0]
main(["gradcam", str(root / "out" / "tiny" / "fold0" / "model"), str(image), "--label", "0",
      "--out", str(root / "cams")])
print(sorted(p.name for p in (root / "cams").iterdir()))
