"""Compositional captions, caption and shape embeddings in a shared space,
cosine-ranked retrieval and its R@k / Top-k scores."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabelVocabulary, LabeledShape, PointCloud, TruncatedFileError
from .data import MagicMismatchError, default_color_map
from .embed import EmbeddingTable, synth_embeddings
from .encoder import EncoderParams, forward
from .losses import LossConfig, loss_and_grad

GALLERY_MAGIC = b"C3GL"
MAX_CLAUSES = 6
CAPTION_PARTS = (1, 3, 6)


class UnknownTokenError(KeyError):
    pass


class CaptionParseError(ValueError):
    pass


@dataclass(frozen=True)
class ColorMap:
    """Material name -> color word, covering every material in a vocabulary."""
    colors: dict

    @classmethod
    def for_vocab(cls, material_vocab: LabelVocabulary, table: dict | None = None) -> "ColorMap":
        lookup = default_color_map(material_vocab.names) if table is None else dict(table)
        missing = [m for m in material_vocab.names if m not in lookup]
        if missing:
            raise KeyError(f"no color word for material {missing[0]!r}")
        return cls({m: lookup[m] for m in material_vocab.names})

    def __getitem__(self, material: str) -> str:
        return self.colors[material]

    def vocabulary(self) -> LabelVocabulary:
        """Color words in first-use order."""
        return LabelVocabulary(tuple(dict.fromkeys(self.colors.values())))


@dataclass(frozen=True)
class Caption:
    shape_name: str
    clauses: tuple
    text: str

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(tuple(c) for c in self.clauses))
        if not 1 <= len(self.clauses) <= MAX_CLAUSES:
            raise ValueError(f"a caption has 1 to {MAX_CLAUSES} clauses")
        if self.text != render_caption(self.shape_name, self.clauses):
            raise ValueError("caption text does not match its template")


def render_caption(shape_name: str, clauses) -> str:
    body = ", ".join(" ".join(c) for c in clauses)
    return f"The {shape_name} is made of {body}."


def _majority(labels: np.ndarray, n: int) -> int:
    return int(np.bincount(labels, minlength=n).argmax())


def caption_parts(shape: LabeledShape, k_parts: int) -> list:
    """(part id, majority material id) pairs, largest parts first, ties to the lower id."""
    if not 1 <= k_parts <= MAX_CLAUSES:
        raise ValueError(f"k_parts must lie in [1, {MAX_CLAUSES}]")
    parts = np.asarray(shape.part_labels)
    if parts.size == 0:
        raise ValueError("shape has no labeled points")
    counts = np.bincount(parts)
    present = np.flatnonzero(counts)
    # stable sort on -count keeps ascending id order among equal counts
    order = present[np.argsort(-counts[present], kind="stable")][:k_parts]
    mats = np.asarray(shape.material_labels)
    n_mat = int(mats.max()) + 1
    return [(int(p), _majority(mats[parts == p], n_mat)) for p in order]


def generate_caption(shape: LabeledShape, vocabs: dict, colors: ColorMap, k_parts: int) -> Caption:
    """``vocabs`` maps "shape", "part" and "material" to LabelVocabulary."""
    clauses = []
    for part, mat in caption_parts(shape, k_parts):
        material = vocabs["material"][mat]
        clauses.append((colors[material], material, vocabs["part"][part]))
    name = vocabs["shape"][shape.shape_class]
    return Caption(name, clauses, render_caption(name, clauses))


def _prefixes(text: str, names: Sequence[str]):
    for name in names:
        if text.startswith(name + " "):
            yield name, text[len(name) + 1:]


def parse_caption(text: str, vocabs: dict, colors: ColorMap) -> Caption:
    """Inverse of rendering; multi-word names are resolved against the vocabularies."""
    head, tail = "The ", "."
    if not (text.startswith(head) and text.endswith(tail)):
        raise CaptionParseError(f"not a caption: {text!r}")
    body = text[len(head):-len(tail)]
    shapes = [s for s in vocabs["shape"].names if body.startswith(s + " is made of ")]
    if len(shapes) != 1:
        raise CaptionParseError(f"cannot identify the shape name in {text!r}")
    shape = shapes[0]
    color_words = colors.vocabulary().names
    clauses = []
    for chunk in body[len(shape) + len(" is made of "):].split(", "):
        found = [(c, m, rest)
                 for c, after_color in _prefixes(chunk, color_words)
                 for m, rest in _prefixes(after_color, vocabs["material"].names)
                 if rest in vocabs["part"].names]
        if len(found) != 1:
            raise CaptionParseError(f"clause {chunk!r} does not parse uniquely")
        clauses.append(found[0])
    return Caption(shape, clauses, text)


def caption_tokens(caption: Caption) -> list:
    """(table key, name) for the shape name and each clause's color, material and part."""
    tokens = [("shape", caption.shape_name)]
    for color, material, part in caption.clauses:
        tokens += [("color", color), ("material", material), ("part", part)]
    return tokens


def embed_caption(caption: Caption, tables: dict) -> np.ndarray:
    """Unit-normalized mean of the caption's token embeddings."""
    rows = []
    for key, name in caption_tokens(caption):
        table = tables[key]
        if name not in table.names.names:
            raise UnknownTokenError(f"{key} token {name!r} has no embedding")
        rows.append(table.row(name))
    v = np.mean(rows, axis=0)
    return v / np.linalg.norm(v)


def caption_tables(vocabs: dict, colors: ColorMap, part_table: EmbeddingTable,
                   material_table: EmbeddingTable, seed: int) -> dict:
    """Token tables for captions; shape names and color words get synthetic rows."""
    dim = part_table.dim
    return {"shape": synth_embeddings(vocabs["shape"], dim, seed),
            "color": synth_embeddings(colors.vocabulary(), dim, seed),
            "part": part_table, "material": material_table}


def embed_shapes(params: EncoderParams, clouds: Sequence, batch_shapes: int = 32) -> np.ndarray:
    """Retrieval-head embeddings (unit rows) for a sequence of clouds or shapes."""
    if not clouds:
        return np.zeros((0, params.dims.d))
    out = [forward(params, list(clouds[i:i + batch_shapes]))[0].retrieval
           for i in range(0, len(clouds), batch_shapes)]
    return np.concatenate(out).astype(np.float64)


def embed_shape(params: EncoderParams, cloud: PointCloud) -> np.ndarray:
    return embed_shapes(params, [cloud])[0]


@dataclass(frozen=True)
class RetrievalGallery:
    embeddings: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        e = np.array(self.embeddings, dtype=np.float64)
        ids = np.array(self.ids, dtype=np.int64)
        if e.ndim != 2 or len(e) != len(ids):
            raise ValueError("need one embedding row per id")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("gallery ids must be unique")
        if len(e) and not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6):
            raise ValueError("gallery rows must be unit vectors")
        object.__setattr__(self, "embeddings", e)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)


def rank_ids(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """ids ordered by descending score, equal scores by ascending id."""
    return ids[np.lexsort((ids, -scores))]


def retrieve(query, gallery: RetrievalGallery) -> np.ndarray:
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (gallery.embeddings.shape[1],):
        raise ValueError("query dimension does not match the gallery")
    return rank_ids(gallery.embeddings @ q, gallery.ids)


def recall_at_k(rankings: Sequence, gt: Sequence, k: int) -> float:
    """Fraction of queries with a relevant id among the first k.

    Each ``gt`` entry is a single id or a collection of equally relevant ids.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(rankings):
        raise ValueError("no queries")
    hits = 0
    for ranking, rel in zip(rankings, gt):
        rel = {int(r) for r in np.atleast_1d(rel)}
        hits += any(int(r) in rel for r in ranking[:k])
    return hits / len(rankings)


def classify_top_k(shape_emb, class_embs, gt_class: int, k: int) -> bool:
    c = np.asarray(class_embs, dtype=np.float64)
    if k > len(c):
        raise ValueError(f"k={k} exceeds the {len(c)} classes")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = rank_ids(c @ np.asarray(shape_emb, dtype=np.float64), np.arange(len(c)))
    return bool(int(gt_class) in order[:k])


def class_embeddings(tables: dict) -> np.ndarray:
    """Class text embedding = the shape-name token row, already unit length."""
    return np.array(tables["shape"].vectors)


@dataclass(frozen=True)
class RetrievalTrainConfig:
    epochs: int = 200
    batch_shapes: int = 32
    learning_rate: float = 2.0
    tau: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_shapes < 2:
            raise ValueError("need epochs >= 1 and batch_shapes >= 2")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")


def _global_features(params: EncoderParams, shapes: Sequence, batch_shapes: int = 32) -> np.ndarray:
    out = [forward(params, list(shapes[i:i + batch_shapes]))[1].g
           for i in range(0, len(shapes), batch_shapes)]
    return np.concatenate(out).astype(np.float64)


def retrieval_objective(w, b, g, targets, tau: float):
    """Contrastive loss of normalized g @ w + b against the batch's own captions.

    Row i's positive is target i; the other rows of the batch act as negatives.
    Returns (loss, dw, db).
    """
    r = g @ w + b
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    r_hat = r / norm
    bd, _, d_hat = loss_and_grad(r_hat, targets, np.arange(len(g)), LossConfig(tau, 0.0))
    dr = (d_hat - r_hat * np.einsum("ij,ij->i", r_hat, d_hat)[:, None]) / norm
    return bd.vl, g.T @ dr, dr.sum(axis=0)


def train_retrieval_head(params: EncoderParams, shapes: Sequence, caption_embs: np.ndarray,
                         cfg: RetrievalTrainConfig) -> tuple:
    """Fit ret_w / ret_b with the trunk frozen. Returns (new params, per-epoch losses).

    Global features are computed once; training then only touches the small
    affine head, in 64-bit.
    """
    g = _global_features(params, shapes)
    targets = np.asarray(caption_embs, dtype=np.float64)
    if len(targets) != len(g):
        raise ValueError("need one caption embedding per shape")
    w = params["ret_w"].astype(np.float64)
    b = params["ret_b"].astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 13])
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(g))
        total, count = 0.0, 0
        for start in range(0, len(g), cfg.batch_shapes):
            idx = order[start:start + cfg.batch_shapes]
            if len(idx) < 2:
                continue
            loss, dw, db = retrieval_objective(w, b, g[idx], targets[idx], cfg.tau)
            if not np.isfinite(loss):
                raise FloatingPointError("retrieval head loss is not finite")
            w -= cfg.learning_rate * dw
            b -= cfg.learning_rate * db
            total += loss
            count += 1
        losses.append(total / max(count, 1))
    out = params.copy()
    out.arrays["ret_w"][...] = w
    out.arrays["ret_b"][...] = b
    out.version += 1
    return out, losses


def caption_key(caption: Caption) -> tuple:
    """The token multiset, which is all a token-mean embedding can see."""
    return tuple(sorted(caption_tokens(caption)))


def equivalent_ids(captions: Sequence[Caption], ids: Sequence[int]) -> list:
    """Per caption, the ids of every caption with the same token multiset.

    Such captions embed to the same query vector, so their shapes are
    indistinguishable to a text query and any of them counts as a hit.
    """
    groups = {}
    for c, i in zip(captions, ids):
        groups.setdefault(caption_key(c), []).append(int(i))
    return [groups[caption_key(c)] for c in captions]


def evaluate_retrieval(gallery: RetrievalGallery, shapes: Sequence[LabeledShape], vocabs: dict,
                       colors: ColorMap, tables: dict, part_counts=CAPTION_PARTS,
                       shape_embs: np.ndarray | None = None) -> dict:
    """R@1 / R@5 per caption length and Top-1 / Top-5 shape classification.

    ``shapes`` are the gallery's shapes in ``gallery.ids`` order. Relevance
    is judged on full-length captions (see ``equivalent_ids``), so shorter
    queries are scored against the same targets.
    """
    full = [generate_caption(s, vocabs, colors, MAX_CLAUSES) for s in shapes]
    relevant = equivalent_ids(full, gallery.ids)
    report = {}
    for k_parts in part_counts:
        rankings = [retrieve(embed_caption(generate_caption(s, vocabs, colors, k_parts), tables),
                             gallery) for s in shapes]
        for k in (1, 5):
            report[f"r{k}_{k_parts}part"] = recall_at_k(rankings, relevant, k)
    embs = gallery.embeddings if shape_embs is None else shape_embs
    cls = class_embeddings(tables)
    n_cls = len(cls)
    for k in (1, 5):
        hits = [classify_top_k(e, cls, s.shape_class, min(k, n_cls)) for e, s in zip(embs, shapes)]
        report[f"top{k}"] = float(np.mean(hits))
    return report


def save_gallery(gallery: RetrievalGallery, path) -> None:
    m, d = gallery.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(GALLERY_MAGIC + struct.pack("<II", m, d))
        for i, row in zip(gallery.ids, gallery.embeddings):
            fh.write(struct.pack("<I", int(i)) + row.astype("<f4").tobytes())


def load_gallery(path) -> RetrievalGallery:
    raw = Path(path).read_bytes()
    if raw[:4] != GALLERY_MAGIC:
        raise MagicMismatchError(f"{path} is not a C3GL gallery")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: truncated gallery header")
    m, d = struct.unpack_from("<II", raw, 4)
    rec = 4 + 4 * d
    if len(raw) != 12 + m * rec:
        raise TruncatedFileError(f"{path}: expected {m} records of {rec} bytes")
    ids, rows = [], []
    for j in range(m):
        off = 12 + j * rec
        ids.append(struct.unpack_from("<I", raw, off)[0])
        rows.append(np.frombuffer(raw, dtype="<f4", count=d, offset=off + 4))
    e = np.array(rows, dtype=np.float64).reshape(m, d)
    # stored at f32; renormalize so rows stay unit at 64-bit
    if m:
        e /= np.linalg.norm(e, axis=1, keepdims=True)
    return RetrievalGallery(e, ids)


def write_captions(captions: Sequence[tuple], path) -> None:
    """``captions`` holds (shape_id, k_parts, Caption) triples; one JSON object per line."""
    with open(path, "w") as fh:
        for shape_id, k_parts, c in captions:
            fh.write(json.dumps({"shape_id": int(shape_id), "k_parts": int(k_parts),
                                 "text": c.text}, sort_keys=True) + "\n")


def read_captions(path, vocabs: dict, colors: ColorMap) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append((int(obj["shape_id"]), int(obj["k_parts"]), parse_caption(obj["text"], vocabs, colors)))
    return out

