"""Document ingestion, vocabulary, batching, NER metrics and synthetic corpora.

The on-disk corpus format is line-delimited JSON, one document per line:
{"id": str, "page_width": int, "page_height": int,
 "tokens": [{"text": str, "bbox": [x0, y0, x1, y1]}, ...],
 "labels": ["O", "B-X", ...]}          # optional, one BIO tag per token
Bounding boxes are raw pixel integers inside the page; they are normalized
to [0, 1000] thousandths at encode time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import geometry, tensor as T
from .geometry import BinningConfig, CartesianBins, RelativeBins
from .model import ModelConfig

IGNORE_INDEX = -100

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
FULL_PAGE_BOX = np.array([0, 0, 1000, 1000], dtype=np.int64)


class DocToken(NamedTuple):
    text: str
    bbox: tuple[int, int, int, int]  # raw pixel coordinates


@dataclass
class Document:
    id: str
    page_width: int
    page_height: int
    tokens: list[DocToken]
    labels: Optional[list[str]] = None

    def __post_init__(self) -> None:
        if self.labels is not None and len(self.labels) != len(self.tokens):
            raise ValueError(
                f"document {self.id}: {len(self.labels)} labels for {len(self.tokens)} tokens"
            )


class ParseError(ValueError):
    pass


def _check_box(doc_id: str, index: int, bbox, width: int, height: int) -> tuple[int, int, int, int]:
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise ParseError(f"document {doc_id}: token {index} bbox must be [x0, y0, x1, y1]")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in bbox):
        raise ParseError(f"document {doc_id}: token {index} bbox must be integers, got {bbox}")
    x0, y0, x1, y1 = bbox
    if x1 < x0 or y1 < y0:
        raise ParseError(f"document {doc_id}: token {index} bbox is inverted: {bbox}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ParseError(f"document {doc_id}: token {index} bbox {bbox} outside page {width}x{height}")
    return (x0, y0, x1, y1)


def document_from_record(rec: dict) -> Document:
    for key in ("id", "page_width", "page_height", "tokens"):
        if key not in rec:
            raise ParseError(f"missing field {key!r}")
    doc_id = rec["id"]
    if not isinstance(doc_id, str):
        raise ParseError("field 'id' must be a string")
    width, height = rec["page_width"], rec["page_height"]
    for name, v in (("page_width", width), ("page_height", height)):
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            raise ParseError(f"field {name!r} must be a positive integer, got {v!r}")
    tokens = []
    for i, tok in enumerate(rec["tokens"]):
        if not isinstance(tok, dict) or "text" not in tok or "bbox" not in tok:
            raise ParseError(f"document {doc_id}: token {i} must have 'text' and 'bbox'")
        if not isinstance(tok["text"], str):
            raise ParseError(f"document {doc_id}: token {i} text must be a string")
        tokens.append(DocToken(tok["text"], _check_box(doc_id, i, tok["bbox"], width, height)))
    labels = rec.get("labels")
    if labels is not None:
        if not isinstance(labels, list) or not all(isinstance(s, str) for s in labels):
            raise ParseError(f"document {doc_id}: 'labels' must be a list of strings")
    return Document(doc_id, width, height, tokens, labels)


def parse_documents(path) -> list[Document]:
    """Read a JSONL corpus; errors carry the 1-based line number."""
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {e}") from None
            try:
                docs.append(document_from_record(rec))
            except ParseError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
    return docs


def document_to_record(doc: Document) -> dict:
    rec = {
        "id": doc.id,
        "page_width": doc.page_width,
        "page_height": doc.page_height,
        "tokens": [{"text": t.text, "bbox": list(t.bbox)} for t in doc.tokens],
    }
    if doc.labels is not None:
        rec["labels"] = list(doc.labels)
    return rec


def write_documents(path, docs: Sequence[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_record(doc), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def normalize_bbox(bbox: Sequence[int], page_width: int, page_height: int) -> np.ndarray:
    """Map raw pixel coordinates to [0, 1000] thousandths (floor, clamped)."""
    if page_width <= 0 or page_height <= 0:
        raise ValueError("page dimensions must be positive")
    x0, y0, x1, y1 = bbox
    out = np.array(
        [
            (1000 * x0) // page_width,
            (1000 * y0) // page_height,
            (1000 * x1) // page_width,
            (1000 * y1) // page_height,
        ],
        dtype=np.int64,
    )
    return np.clip(out, 0, 1000)


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def n_special(self) -> int:
        return len(SPECIAL_TOKENS)

    def lookup(self, text: str) -> int:
        return self.token_to_id.get(text.lower(), UNK)

    def to_list(self) -> list[str]:
        return list(self.id_to_token)

    @staticmethod
    def from_list(tokens: Sequence[str]) -> "Vocab":
        toks = tuple(tokens)
        if toks[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocab list must start with the special tokens")
        return Vocab(toks, {t: i for i, t in enumerate(toks)})


def build_vocab(corpus: Sequence[Document], min_freq: int = 1) -> Vocab:
    """Lowercased word types with frequency >= min_freq, ordered by frequency
    descending then lexicographic, after the fixed special ids."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for doc in corpus:
        for tok in doc.tokens:
            key = tok.text.lower()
            counts[key] = counts.get(key, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocab.from_list(list(SPECIAL_TOKENS) + kept)


Segment = tuple[int, int]  # half-open token-index range sharing one box


@dataclass
class EncodedDoc:
    doc_id: str
    token_ids: np.ndarray  # [n] int64, includes CLS/SEP
    pos_ids: np.ndarray  # [n] int64, 0..n-1
    bboxes: np.ndarray  # [n, 4] normalized
    special: np.ndarray  # [n] bool, True at CLS/SEP
    bins: RelativeBins | CartesianBins | None
    segments: list[Segment]
    label_ids: Optional[np.ndarray] = None  # [n] int64 with IGNORE_INDEX at specials
    n_source_tokens: int = 0

    @property
    def n(self) -> int:
        return len(self.token_ids)


def detect_segments(norm_boxes: np.ndarray) -> list[Segment]:
    """Maximal runs of consecutive tokens sharing an identical normalized box."""
    segs: list[Segment] = []
    n = len(norm_boxes)
    i = 0
    while i < n:
        j = i + 1
        while j < n and np.array_equal(norm_boxes[j], norm_boxes[i]):
            j += 1
        segs.append((i, j))
        i = j
    return segs


def encode(
    doc: Document,
    vocab: Vocab,
    cfg: ModelConfig,
    label_to_id: Optional[dict[str, int]] = None,
) -> EncodedDoc:
    """Wrap with CLS/SEP (full-page boxes), truncate to max_seq_len, compute
    normalized boxes and the pairwise bin matrices for cfg.bias_mode."""
    keep = min(len(doc.tokens), cfg.max_seq_len - 2)
    ids = [CLS] + [vocab.lookup(t.text) for t in doc.tokens[:keep]] + [SEP]
    boxes = np.stack(
        [FULL_PAGE_BOX]
        + [normalize_bbox(t.bbox, doc.page_width, doc.page_height) for t in doc.tokens[:keep]]
        + [FULL_PAGE_BOX]
    )
    n = len(ids)
    special = np.zeros(n, dtype=bool)
    special[0] = special[-1] = True
    # Pairs that involve CLS/SEP carry the coincident-center bins: the
    # specials' synthetic page box must stay geometrically neutral, so that
    # shifting a document's real boxes cannot change any bin.
    pair_mask = special[:, None] | special[None, :]
    if cfg.bias_mode == "polar":
        bins = geometry.relative_bins(geometry.centers_of(boxes), cfg.binning)
        bins.dist[pair_mask] = 0
        bins.angle[pair_mask] = geometry.angle_bin_of_zero(cfg.binning)
    elif cfg.bias_mode == "cartesian":
        bins = geometry.cartesian_relative_bins(boxes, cfg.binning)
        bins.dx[pair_mask] = cfg.binning.n_dist_bins
        bins.dy[pair_mask] = cfg.binning.n_dist_bins
    else:
        bins = None
    label_ids = None
    if label_to_id is not None:
        if doc.labels is None:
            raise ValueError(f"document {doc.id} has no labels")
        label_ids = np.full(n, IGNORE_INDEX, dtype=np.int64)
        for i, tag in enumerate(doc.labels[:keep]):
            label_ids[i + 1] = label_to_id[tag]
    return EncodedDoc(
        doc_id=doc.id,
        token_ids=np.asarray(ids, dtype=np.int64),
        pos_ids=np.arange(n, dtype=np.int64),
        bboxes=boxes,
        special=special,
        bins=bins,
        segments=detect_segments(boxes[1:-1]),
        label_ids=label_ids,
        n_source_tokens=len(doc.tokens),
    )


@dataclass
class Batch:
    """Padded arrays for a batch of encoded documents."""

    token_ids: np.ndarray  # [B, n]
    pos_ids: np.ndarray  # [B, n]
    bboxes: np.ndarray  # [B, n, 4]
    pad_mask: np.ndarray  # [B, n] True at real positions
    special: np.ndarray  # [B, n]
    dist_bins: Optional[np.ndarray] = None  # [B, n, n]
    angle_bins: Optional[np.ndarray] = None
    dx_bins: Optional[np.ndarray] = None
    dy_bins: Optional[np.ndarray] = None
    mlm_targets: Optional[np.ndarray] = None  # [B, n]
    lop_targets: Optional[np.ndarray] = None
    ner_targets: Optional[np.ndarray] = None
    lengths: Optional[np.ndarray] = None  # [B]

    def bins_for(self, bias_mode: str):
        if bias_mode == "polar":
            return RelativeBins(self.dist_bins, self.angle_bins)
        if bias_mode == "cartesian":
            return CartesianBins(self.dx_bins, self.dy_bins)
        return None

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def collate(
    items: Sequence[EncodedDoc],
    token_ids: Optional[Sequence[np.ndarray]] = None,
    pos_ids: Optional[Sequence[np.ndarray]] = None,
    mlm_targets: Optional[Sequence[np.ndarray]] = None,
    lop_targets: Optional[Sequence[np.ndarray]] = None,
    with_labels: bool = False,
) -> Batch:
    """Pad per-document arrays to the longest sequence in the batch.

    token_ids / pos_ids default to each document's own arrays; the optional
    overrides carry masking-corrupted inputs.
    """
    bsz = len(items)
    n = max(it.n for it in items)
    out_tok = np.zeros((bsz, n), dtype=np.int64)
    out_pos = np.zeros((bsz, n), dtype=np.int64)
    out_box = np.zeros((bsz, n, 4), dtype=np.int64)
    pad_mask = np.zeros((bsz, n), dtype=bool)
    special = np.zeros((bsz, n), dtype=bool)
    lengths = np.zeros(bsz, dtype=np.int64)
    first = items[0]
    polar = isinstance(first.bins, RelativeBins)
    cart = isinstance(first.bins, CartesianBins)
    d_b = np.zeros((bsz, n, n), dtype=np.int64) if polar else None
    a_b = np.zeros((bsz, n, n), dtype=np.int64) if polar else None
    dx_b = np.zeros((bsz, n, n), dtype=np.int64) if cart else None
    dy_b = np.zeros((bsz, n, n), dtype=np.int64) if cart else None
    mlm_t = np.full((bsz, n), IGNORE_INDEX, dtype=np.int64) if mlm_targets is not None else None
    lop_t = np.full((bsz, n), IGNORE_INDEX, dtype=np.int64) if lop_targets is not None else None
    ner_t = np.full((bsz, n), IGNORE_INDEX, dtype=np.int64) if with_labels else None
    for b, it in enumerate(items):
        m = it.n
        lengths[b] = m
        out_tok[b, :m] = token_ids[b] if token_ids is not None else it.token_ids
        out_pos[b, :m] = pos_ids[b] if pos_ids is not None else it.pos_ids
        out_box[b, :m] = it.bboxes
        pad_mask[b, :m] = True
        special[b, :m] = it.special
        if polar:
            d_b[b, :m, :m] = it.bins.dist
            a_b[b, :m, :m] = it.bins.angle
        elif cart:
            dx_b[b, :m, :m] = it.bins.dx
            dy_b[b, :m, :m] = it.bins.dy
        if mlm_t is not None:
            mlm_t[b, :m] = mlm_targets[b]
        if lop_t is not None:
            lop_t[b, :m] = lop_targets[b]
        if ner_t is not None:
            if it.label_ids is None:
                raise ValueError(f"document {it.doc_id} has no label ids")
            ner_t[b, :m] = it.label_ids
    return Batch(
        token_ids=out_tok, pos_ids=out_pos, bboxes=out_box, pad_mask=pad_mask,
        special=special, dist_bins=d_b, angle_bins=a_b, dx_bins=dx_b, dy_bins=dy_b,
        mlm_targets=mlm_t, lop_targets=lop_t, ner_targets=ner_t, lengths=lengths,
    )


# ---------------------------------------------------------------------------
# BIO tagging and entity-level F1


def bio_decode(tags: Sequence[str]) -> list[tuple[str, int, int]]:
    """Spans (type, start, end) from BIO tags. Lenient: an I- tag that does
    not continue a same-type span starts a new entity."""
    spans = []
    current: Optional[tuple[str, int]] = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if current:
                spans.append((current[0], current[1], i))
                current = None
            continue
        if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
            raise ValueError(f"unknown BIO tag {tag!r} at index {i}")
        prefix, etype = tag[0], tag[2:]
        if prefix == "B" or current is None or current[0] != etype:
            if current:
                spans.append((current[0], current[1], i))
            current = (etype, i)
    if current:
        spans.append((current[0], current[1], len(tags)))
    return spans


def bio_encode(spans: Sequence[tuple[str, int, int]], length: int) -> list[str]:
    tags = ["O"] * length
    for etype, start, end in spans:
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = f"I-{etype}"
    return tags


def entity_f1(
    pred: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    doc_ids: Optional[Sequence[str]] = None,
) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over exact (type, start, end) matches."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold documents")
    tp = n_pred = n_gold = 0
    for k, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            did = doc_ids[k] if doc_ids is not None else str(k)
            raise ValueError(f"document {did}: {len(p)} predicted tags for {len(g)} tokens")
        ps = set(bio_decode(p))
        gs = set(bio_decode(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# ---------------------------------------------------------------------------
# synthetic corpora

FIELD_WORDS = ("alpha", "beta", "gamma", "delta", "name", "date",
               "total", "ref", "city", "zip", "phone", "mail")
VALUE_WORDS = tuple(f"v{k}" for k in range(len(FIELD_WORDS)))
HEADER_WORDS = ("alpha", "beta", "gamma", "delta")
VALUE_POOL = tuple(str(v) for v in range(40))

PAGE = 1000
N_FORM_FIELDS = 8


def _forms_document(doc_id: str, rng: np.random.Generator) -> Document:
    """A filled instance of a fixed 12-field form template.

    Every field has a canonical grid slot (6 rows x 2 columns); a document
    reveals a random 8-field subset, each key with its value box adjacent to
    the right. The token sequence is the raster (top-down, then left-right)
    reading order an OCR engine would emit, so both a token's identity and
    its sequence position are functions of the layout alone.
    """
    shown = [int(f) for f in rng.choice(len(FIELD_WORDS), size=N_FORM_FIELDS, replace=False)]
    tokens: list[DocToken] = []
    labels: list[str] = []
    for f in sorted(shown, key=lambda f: (f % 6, f // 6)):  # raster order
        row, col = f % 6, f // 6
        x = 60 + col * 500 + int(rng.integers(0, 30))
        y = 60 + row * 150
        tokens.append(DocToken(FIELD_WORDS[f], (x, y, x + 90, y + 30)))
        labels.append("O")
        tokens.append(DocToken(VALUE_WORDS[f], (x + 110, y, x + 180, y + 30)))
        labels.append(f"B-{FIELD_WORDS[f].upper()}")
    return Document(doc_id, PAGE, PAGE, tokens, labels)


def _tables_document(doc_id: str, rng: np.random.Generator) -> Document:
    """A header row whose column decides every cell's label.

    Cell texts are drawn from one shared numeric pool, so the label is not
    decidable from text. Column x-centers are aligned exactly, columns are
    spaced wider than the row pitch (so a cell's own header sits alone in
    the straight-up angle bin), cells drop out at random and survivors are
    emitted in shuffled order within each row.
    """
    n_cols = int(rng.integers(2, 4))
    n_rows = int(rng.integers(2, 6))
    headers = [str(h) for h in rng.choice(HEADER_WORDS, size=n_cols, replace=False)]
    col_x = [150 + c * 300 for c in range(n_cols)]
    top = 60 + int(rng.integers(0, 20))
    tokens: list[DocToken] = []
    labels: list[str] = []
    for c in range(n_cols):
        tokens.append(DocToken(headers[c], (col_x[c], top, col_x[c] + 100, top + 36)))
        labels.append("O")
    for r in range(n_rows):
        y = top + (r + 1) * 60
        cols = [c for c in range(n_cols) if rng.random() >= 0.3]
        for c in rng.permutation(len(cols)):
            col = cols[int(c)]
            tokens.append(DocToken(str(rng.choice(VALUE_POOL)), (col_x[col], y, col_x[col] + 100, y + 36)))
            labels.append(f"B-{headers[col].upper()}")
    if len(tokens) == n_cols:  # all cells dropped; force one
        y = top + 60
        tokens.append(DocToken(str(rng.choice(VALUE_POOL)), (col_x[0], y, col_x[0] + 100, y + 36)))
        labels.append(f"B-{headers[0].upper()}")
    return Document(doc_id, PAGE, PAGE, tokens, labels)


def generate_synthetic_corpus(
    kind: str, n_docs: int, seed: int
) -> tuple[list[Document], list[Document]]:
    """Deterministic labeled corpus of `kind` in {"forms", "tables"}.

    Returns (train, eval) where train has n_docs documents and eval has
    round(0.25 * n_docs) extra held-out documents.
    """
    if kind not in ("forms", "tables"):
        raise ValueError(f"kind must be 'forms' or 'tables', got {kind!r}")
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    n_eval = round(0.25 * n_docs)
    docs = []
    for i in range(n_docs + n_eval):
        rng = T.make_rng(seed, "synth", kind, i)
        if kind == "forms":
            docs.append(_forms_document(f"{kind}-{seed}-{i:04d}", rng))
        else:
            docs.append(_tables_document(f"{kind}-{seed}-{i:04d}", rng))
    return docs[:n_docs], docs[n_docs:]
