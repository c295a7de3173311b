"""Caption corpora: tokenization, vocabulary, pairing, batching, synthesis.

A dataset is a JSON manifest of video records (id, feature file path,
caption strings, split). Captions are tokenized on load; the vocabulary
reserves ids 0..3 for <pad>, <sos>, <eos>, <unk>.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureMatrix, read_feature_file, synth_features, write_feature_file

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
SEP_TOKEN = "<sep>"  # sentence separator inside dense-mode paragraphs

# decoder-length defaults: single captions, and 3-4 sentence paragraphs
# (roughly 14 words per sentence plus separators, rounded up)
MAX_LEN_SINGLE = 20
MAX_LEN_PARAGRAPH = 80

MANIFEST_VERSION = 1

_STRIP_CHARS = '.,!?;:"()'
_STRIP_TABLE = str.maketrans({c: " " for c in _STRIP_CHARS})


def tokenize(text: str) -> list:
    """Lowercase, blank out sentence punctuation, split on whitespace.

    Internal apostrophes survive ("don't" stays one token).
    """
    return text.lower().translate(_STRIP_TABLE).split()


class Vocabulary:
    """Bijective token <-> id map with four reserved leading ids."""

    def __init__(self, tokens, min_count: int = 1):
        self.min_count = min_count
        self._id_to_token = list(RESERVED) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode(self, tokens) -> list:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list:
        return [self._id_to_token[i] for i in ids]


@dataclass
class VideoRecord:
    video_id: str
    feature_path: str
    captions: list  # list of token lists, each non-empty
    split: str = "train"

    def __post_init__(self):
        if not self.captions:
            raise DataError(f"record {self.video_id!r} has no captions")
        for c in self.captions:
            if not c:
                raise DataError(f"record {self.video_id!r} has an empty caption")


@dataclass
class CaptionBatch:
    """One padded training batch.

    ``dec_input`` starts with <sos> and ``target`` ends with <eos>; they are
    the same sequence shifted by one. Feature rows beyond a video's length
    are zero and masked out through ``feature_lengths``.
    """

    video_ids: list
    features: np.ndarray  # [B, T_max, D]
    feature_lengths: np.ndarray  # [B]
    dec_input: np.ndarray  # [B, L]
    target: np.ndarray  # [B, L]

    @property
    def feature_mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.feature_lengths[:, None]

    @property
    def target_mask(self) -> np.ndarray:
        return self.target != PAD

    def __len__(self):
        return len(self.video_ids)


def build_vocab(records, min_count: int = 1) -> Vocabulary:
    """Tokens with corpus frequency >= min_count, ordered by descending
    frequency then lexicographically. Pure function of its inputs."""
    records = list(records)
    if not records:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for r in records:
        for caption in r.captions:
            counts.update(caption)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count=min_count)


def sample_pairing(record: VideoRecord, rng: np.random.Generator, features: FeatureMatrix | None = None):
    """Pair a video's features with one caption chosen uniformly by ``rng``."""
    if features is None:
        features = read_feature_file(record.feature_path)
    idx = int(rng.integers(len(record.captions)))
    return features, record.captions[idx]


def encode_caption(caption, vocab: Vocabulary, max_len: int):
    """Truncate to max_len - 1 tokens, then build the shifted-by-one pair."""
    ids = vocab.encode(caption[: max_len - 1])
    return [SOS] + ids, ids + [EOS]


def make_batches(records, vocab: Vocabulary, batch_size: int, max_len: int, rng: np.random.Generator, features: dict):
    """Shuffle records, pair captions, pad, and chunk into CaptionBatch lists.

    ``features`` maps video_id to its FeatureMatrix (preloaded once per run;
    batches reference the same arrays). Every record appears exactly once.
    """
    if max_len < 2:
        raise DataError("max_len must be >= 2")
    records = list(records)
    order = rng.permutation(len(records))
    chosen = []
    for idx in order:
        r = records[idx]
        m, caption = sample_pairing(r, rng, features[r.video_id])
        if not caption:
            raise DataError(f"record {r.video_id!r} produced an empty caption")
        chosen.append((r.video_id, m, *encode_caption(caption, vocab, max_len)))

    batches = []
    for start in range(0, len(chosen), batch_size):
        chunk = chosen[start : start + batch_size]
        t_max = max(m.rows for _, m, _, _ in chunk)
        dim = chunk[0][1].dim
        l_max = max(len(inp) for _, _, inp, _ in chunk)
        feats = np.zeros((len(chunk), t_max, dim))
        lengths = np.zeros(len(chunk), dtype=int)
        dec_input = np.full((len(chunk), l_max), PAD, dtype=int)
        target = np.full((len(chunk), l_max), PAD, dtype=int)
        ids = []
        for i, (vid, m, inp, tgt) in enumerate(chunk):
            feats[i, : m.rows] = m.values
            lengths[i] = m.rows
            dec_input[i, : len(inp)] = inp
            target[i, : len(tgt)] = tgt
            ids.append(vid)
        batches.append(CaptionBatch(ids, feats, lengths, dec_input, target))
    return batches


# ---------------------------------------------------------------------------
# manifest i/o
# ---------------------------------------------------------------------------


def save_manifest(path, records, caption_texts: dict) -> None:
    """Write the JSON manifest; ``caption_texts`` maps video_id to the raw
    caption strings (records hold tokens only). Feature paths are stored
    relative to the manifest when they live beneath it."""
    base = Path(path).resolve().parent
    rows = []
    for r in records:
        fp = Path(r.feature_path).resolve()
        try:
            stored = fp.relative_to(base).as_posix()
        except ValueError:
            stored = str(fp)
        rows.append(
            {
                "video_id": r.video_id,
                "feature_path": stored,
                "captions": caption_texts[r.video_id],
                "split": r.split,
            }
        )
    doc = {"version": MANIFEST_VERSION, "records": rows}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path, check_features: bool = True):
    """Load records, tokenizing captions; optionally verify feature files exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: manifest version {doc.get('version')!r}, expected {MANIFEST_VERSION}")
    base = path.parent
    records = []
    for row in doc.get("records", []):
        feature_path = base / row["feature_path"] if not Path(row["feature_path"]).is_absolute() else Path(row["feature_path"])
        captions = [tokenize(c) for c in row["captions"]]
        if any(not c for c in captions):
            raise DataError(f"record {row['video_id']!r} has a caption with no tokens")
        if check_features and not feature_path.exists():
            raise DataError(f"feature file missing for {row['video_id']!r}: {feature_path}")
        records.append(
            VideoRecord(
                video_id=row["video_id"],
                feature_path=str(feature_path),
                captions=captions,
                split=row.get("split", "train"),
            )
        )
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return records


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

# verb/object pairs that parameterize the caption templates, one per class
_CLASS_WORDS = [
    ("cooking", "food"),
    ("playing", "guitar"),
    ("riding", "bicycle"),
    ("walking", "dog"),
    ("singing", "song"),
    ("driving", "car"),
    ("reading", "book"),
    ("painting", "wall"),
    ("slicing", "onion"),
    ("throwing", "ball"),
]

_TEMPLATES = [
    "a man is {verb} {obj}",
    "a woman is {verb} {obj} outside",
    "someone is {verb} {obj} slowly",
]


@dataclass
class SynthSpec:
    """Knobs for the synthetic caption corpus."""

    n_classes: int = 8
    videos_per_class: int = 10
    templates_per_class: int = 3
    captions_per_video: int = 1
    dense: bool = False  # emit 3-4 sentence paragraphs joined by <sep>
    feature_dim: int = 32
    rows_range: tuple = (4, 8)
    signal_strength: float = 0.9


def _class_sentences(spec: SynthSpec, label: int) -> list:
    if label < len(_CLASS_WORDS):
        verb, obj = _CLASS_WORDS[label]
    else:
        verb, obj = f"verb{label}", f"object{label}"
    return [t.format(verb=verb, obj=obj) for t in _TEMPLATES[: spec.templates_per_class]]


def synth_corpus(spec: SynthSpec, seed: int, out_dir):
    """Write feature files and a manifest for a synthetic corpus.

    Deterministic from (spec, seed). In dense mode every video carries a
    3-4 sentence paragraph with sentences joined by the <sep> token.
    Returns (records, manifest_path).
    """
    if spec.templates_per_class < 1 or spec.templates_per_class > len(_TEMPLATES):
        raise DataError(f"templates_per_class must be in 1..{len(_TEMPLATES)}")
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    n_videos = spec.n_classes * spec.videos_per_class
    matrices, labels = synth_features(
        seed=seed,
        n_videos=n_videos,
        rows_range=spec.rows_range,
        dim=spec.feature_dim,
        n_classes=spec.n_classes,
        signal_strength=spec.signal_strength,
    )
    rng = np.random.default_rng([seed, 1])  # caption stream, separate from features
    records = []
    texts = {}
    for m, label in zip(matrices, labels):
        sentences = _class_sentences(spec, label)
        captions = []
        for _ in range(spec.captions_per_video):
            if spec.dense:
                n_sent = int(rng.integers(3, 5))
                parts = [sentences[int(rng.integers(len(sentences)))] for _ in range(n_sent)]
                captions.append(f" {SEP_TOKEN} ".join(parts))
            else:
                captions.append(sentences[int(rng.integers(len(sentences)))])
        path = feat_dir / f"{m.video_id}.vfm"
        write_feature_file(path, m)
        records.append(
            VideoRecord(
                video_id=m.video_id,
                feature_path=str(path),
                captions=[tokenize(c) for c in captions],
                split="train",
            )
        )
        texts[m.video_id] = captions

    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, records, texts)
    return records, manifest_path


def load_features_for(records) -> dict:
    """Read every record's feature file once; keyed by video_id."""
    return {r.video_id: read_feature_file(r.feature_path) for r in records}
