# %% [markdown]
# # Data to retrieval in one pass
#
# A small synthetic long-tail dataset, a short training run, then the
# segmentation, GCR and caption-retrieval scores the CLI reports.

# %%
import numpy as np

from vilhub.data import (TEST, TRAIN, GeneratorConfig, generate_synthetic_dataset,
                         pack_mask_pixel, split_dataset, unpack_mask_pixel)
from vilhub.embed import synth_embeddings
from vilhub.metrics import gcr_evaluate
from vilhub.retrieval import (MAX_CLAUSES, ColorMap, RetrievalGallery, RetrievalTrainConfig,
                              caption_tables, embed_caption, embed_shapes, evaluate_retrieval,
                              generate_caption, train_retrieval_head)
from vilhub.trainer import TrainConfig, predict, segmentation_scores, train

gen = GeneratorConfig(n_shape_classes=5, n_part_classes=12, n_material_classes=6,
                      shapes_total=120, points_per_shape=256, zipf_exponent=1.5, seed=1)
ds = split_dataset(generate_synthetic_dataset(gen), (0.75, 0.1, 0.15), 1)
print(len(ds), "shapes; class counts", ds.class_counts())

# %% [markdown]
# Frozen synthetic text embeddings stand in for a language encoder.

# %%
emb = {"part": synth_embeddings(ds.part_vocab, 32, 0),
       "mat": synth_embeddings(ds.material_vocab, 32, 0)}
cfg = TrainConfig(epochs=15, learning_rate=0.02, gamma=1.0, seed=1, h1=32, h2=64)
params, history = train(ds, emb, cfg)
for rec in history.epochs[::5] + history.epochs[-1:]:
    print(f"epoch {rec.epoch:3d}  total {rec.total:.4f}  val mIoU part {rec.val_miou_part:.3f}")

# %%
test = ds.subset(TEST)
preds, prefs = predict(params, test, emb, cfg.tau)
scores = segmentation_scores(preds, test, len(ds.part_vocab), len(ds.material_vocab))
print("part acc", round(scores["part_acc"], 3), "part mIoU", round(scores["part_iou"][1], 3))
print("material acc", round(scores["mat_acc"], 3), "material mIoU", round(scores["mat_iou"][1], 3))
print(gcr_evaluate(preds, test).as_dict())

# %% [markdown]
# Captions list parts by size with the majority material and its color word.

# %%
vocabs = {"shape": ds.shape_vocab, "part": ds.part_vocab, "material": ds.material_vocab}
colors = ColorMap.for_vocab(ds.material_vocab)
for k in (1, 3, 6):
    print(generate_caption(test[0], vocabs, colors, k).text)

# %%
tables = caption_tables(vocabs, colors, emb["part"], emb["mat"], 0)
train_shapes = ds.subset(TRAIN)
targets = np.array([embed_caption(generate_caption(s, vocabs, colors, MAX_CLAUSES), tables)
                    for s in train_shapes])
params, losses = train_retrieval_head(params, train_shapes, targets,
                                      RetrievalTrainConfig(epochs=100, seed=1))
gallery = RetrievalGallery(embed_shapes(params, test), ds.indices(TEST))
print({k: round(v, 3) for k, v in evaluate_retrieval(gallery, test, vocabs, colors, tables).items()})

# %% [markdown]
# Mask pixels carry three label ids in one RGB triple.

# %%
rgb = pack_mask_pixel(5, 2, 3)
print(rgb, unpack_mask_pixel(*rgb))
