"""Prompted sequence assembly with placeholder blocks for missing modalities.

A sample becomes one embedding sequence::

    [prompt] [observed blocks...] [missing blocks...] [fusion tokens]

Each modality block is ``<m_start>, T interior rows, <m_end>``.  Observed
blocks carry projected features; missing blocks carry ``T`` copies of the
learnable ``<missing_m>`` embedding.  The :class:`SequenceLayout` records
where everything landed so hidden states can be read back by position.
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .numerics.tensor import ShapeError, Tensor, concat, gather_rows, matmul, reshape

MODALITIES = ("v", "f", "a")

# Report column order; "vfa" is the full condition.
CONDITIONS = ("vf", "va", "fa", "v", "f", "a", "vfa")
INCOMPLETE_CONDITIONS = CONDITIONS[:6]

_TEMPLATES = {
    "condition": "Given the available {avail} features from an action video. The {miss} modality is missing.",
    "task": (
        "Based on the available modalities, please infer and reconstruct the useful latent "
        "representations for the missing {miss} modalities at the designated positions."
    ),
    "fusion": (
        "Then integrate and enhance all multimodal features for action quality assessment. "
        "Output the fused multi-dimensional feature representations at the designated feature dimension positions:"
    ),
}

# variant -> (template clauses rendered in order, hide condition slots)
PROMPT_VARIANTS = {
    "full": (("condition", "task", "fusion"), False),
    "imputation_only": (("condition", "task"), False),
    "no_fusion_guide": (("condition", "task"), False),
    "no_condition": (("task", "fusion"), True),
    "no_task": (("condition", "fusion"), False),
    "fusion_only": (("fusion",), False),
    "none": ((), False),
}


def resolve_prompt(variant, drop=()):
    """(clauses, hide) for a variant name, minus the clauses listed in ``drop``."""
    if isinstance(variant, str):
        if variant not in PROMPT_VARIANTS:
            raise ValueError(f"unknown prompt variant {variant!r}; expected one of {sorted(PROMPT_VARIANTS)}")
        clauses, hide = PROMPT_VARIANTS[variant]
    else:
        clauses, hide = variant
    clauses = tuple(c for c in clauses if c not in drop)
    unknown = set(clauses) - set(_TEMPLATES)
    if unknown:
        raise ValueError(f"unknown prompt clauses {sorted(unknown)}")
    return clauses, bool(hide)


class MaskError(ValueError):
    pass


def validate_mask(mask):
    m = tuple(int(x) for x in np.asarray(mask).reshape(-1))
    if len(m) != len(MODALITIES) or any(x not in (0, 1) for x in m):
        raise MaskError(f"mask must be {len(MODALITIES)} binary entries, got {mask!r}")
    if not any(m):
        raise MaskError("mask must keep at least one modality")
    return m


def mask_from_condition(name):
    if not name or any(c not in MODALITIES for c in name):
        raise MaskError(f"bad condition name {name!r}")
    return tuple(int(m in name) for m in MODALITIES)


def condition_name(mask):
    return "".join(m for m, bit in zip(MODALITIES, mask) if bit)


def all_masks():
    """The seven non-empty subsets, in report order."""
    return [mask_from_condition(c) for c in CONDITIONS]


def _words(text):
    return re.findall(r"\{avail\}|\{miss\}|[A-Za-z][A-Za-z\-]*|[.,:]", text)


class SpecialVocab:
    """Closed word-level vocabulary: template words, condition tokens, special tokens."""

    def __init__(self, num_fusion_tokens):
        tokens = []
        for m in MODALITIES:
            tokens += [f"<{m}_start>", f"<{m}_end>"]
        tokens += [f"<missing_{m}>" for m in MODALITIES]
        tokens += [f"<emb_dim_{k + 1}>" for k in range(num_fusion_tokens)]
        tokens += [f"<avail_{c}>" for c in CONDITIONS]
        tokens += [f"<miss_{c}>" for c in CONDITIONS if c != "vfa"] + ["<miss_none>", "<cond_hidden>"]
        words = []
        for key in ("condition", "task", "fusion"):
            for w in _words(_TEMPLATES[key]):
                w = w.lower()
                if not w.startswith("{") and w not in words:
                    words.append(w)
        tokens += words
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        if len(self.ids) != len(tokens):
            raise AssertionError("duplicate vocabulary entries")
        self.num_fusion_tokens = num_fusion_tokens

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        try:
            return self.ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} is not in the closed vocabulary") from None

    def start(self, m):
        return self.ids[f"<{m}_start>"]

    def end(self, m):
        return self.ids[f"<{m}_end>"]

    def missing(self, m):
        return self.ids[f"<missing_{m}>"]

    def fusion(self, k):
        return [self.ids[f"<emb_dim_{i + 1}>"] for i in range(k)]

    def manifest(self):
        return {
            "version": 1,
            "tokens": list(self.tokens),
            "templates": dict(_TEMPLATES),
            "variants": {k: {"clauses": list(v[0]), "hide_condition": v[1]} for k, v in PROMPT_VARIANTS.items()},
        }

    def write_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)


def build_prompt(mask, variant, vocab):
    """Token ids of the rendered prompt for ``mask``.

    Condition slots become single tokens (``<avail_vf>``, ``<miss_a>``,
    ``<miss_none>``), so every mask yields the same prompt length.
    ``variant`` is a name from ``PROMPT_VARIANTS`` or a ``(clauses, hide)``
    pair; with ``hide`` set, the slots render as one mask-independent token.
    """
    clauses, hide = resolve_prompt(variant)
    avail = condition_name(mask)
    miss = "".join(m for m, bit in zip(MODALITIES, mask) if not bit)
    ids = []
    for clause in clauses:
        for w in _words(_TEMPLATES[clause]):
            if w == "{avail}":
                ids.append(vocab.id("<cond_hidden>" if hide else f"<avail_{avail}>"))
            elif w == "{miss}":
                ids.append(vocab.id("<cond_hidden>" if hide else f"<miss_{miss or 'none'}>"))
            else:
                ids.append(vocab.id(w.lower()))
    return ids


@dataclass
class SequenceLayout:
    """Index map of one assembled sequence (positions only, no values)."""

    mask: tuple
    T: int
    K: int
    prompt_ids: list
    boundaries: bool = True
    order: tuple = ()
    block_spans: dict = field(default_factory=dict)
    interior: dict = field(default_factory=dict)
    fusion_positions: np.ndarray = None
    seq_len: int = 0

    @property
    def prompt_len(self):
        return len(self.prompt_ids)

    @property
    def prompt_span(self):
        return (0, self.prompt_len)

    @property
    def observed(self):
        return tuple(m for m, bit in zip(MODALITIES, self.mask) if bit)

    @property
    def missing(self):
        return tuple(m for m, bit in zip(MODALITIES, self.mask) if not bit)


def make_layout(mask, T, K, prompt_ids, boundaries=True):
    mask = validate_mask(mask)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    lay = SequenceLayout(mask=mask, T=T, K=K, prompt_ids=list(prompt_ids), boundaries=boundaries)
    pos = lay.prompt_len
    edge = 1 if boundaries else 0
    lay.order = lay.observed + lay.missing
    for m in lay.order:
        start = pos
        lay.interior[m] = np.arange(start + edge, start + edge + T)
        pos = start + T + 2 * edge
        lay.block_spans[m] = (start, pos)
    lay.fusion_positions = np.arange(pos, pos + K)
    lay.seq_len = pos + K
    return lay


def token_plan(layout, vocab, missing_fill="token"):
    """Per-position source: ('tok', id) | ('feat', modality, t) | ('zero',)."""
    plan = [("tok", i) for i in layout.prompt_ids]
    for m in layout.order:
        if layout.boundaries:
            plan.append(("tok", vocab.start(m)))
        if m in layout.observed:
            plan += [("feat", m, t) for t in range(layout.T)]
        elif missing_fill == "token":
            plan += [("tok", vocab.missing(m))] * layout.T
        elif missing_fill == "zero":
            plan += [("zero",)] * layout.T
        else:
            raise ValueError(f"unknown missing_fill {missing_fill!r}")
        if layout.boundaries:
            plan.append(("tok", vocab.end(m)))
    plan += [("tok", i) for i in vocab.fusion(layout.K)]
    return plan


@dataclass
class AssembledSequence:
    embeddings: Tensor
    layout: SequenceLayout

    @property
    def seq_len(self):
        return self.layout.seq_len


def assemble(projected, mask, K, embed_fn, vocab, T=None, variant="full", boundaries=True, missing_fill="token"):
    """Build one sample's input sequence.

    ``projected`` maps each *available* modality to a (T, D) tensor;
    ``embed_fn(ids)`` returns token embeddings of shape (len(ids), D).
    """
    mask = validate_mask(mask)
    avail = {m for m, bit in zip(MODALITIES, mask) if bit}
    given = set(projected)
    if given - avail:
        raise MaskError(f"assemble: features supplied for masked-out modalities {sorted(given - avail)}")
    if avail - given:
        raise MaskError(f"assemble: no features for available modalities {sorted(avail - given)}")
    lengths = {projected[m].shape[0] for m in given}
    if len(lengths) > 1:
        raise ShapeError(f"assemble: modality blocks differ in length {sorted(lengths)}")
    if T is None:
        T = lengths.pop()
    elif lengths and lengths.pop() != T:
        raise ShapeError("assemble: block length does not match T")
    lay = make_layout(mask, T, K, build_prompt(mask, variant, vocab), boundaries)
    probe = embed_fn([])
    pieces = []
    run = []

    def flush():
        if run:
            pieces.append(embed_fn(list(run)))
            run.clear()

    for src in token_plan(lay, vocab, missing_fill):
        if src[0] == "tok":
            run.append(src[1])
        elif src[0] == "feat":
            if src[2] == 0:
                flush()
                pieces.append(projected[src[1]])
        else:
            flush()
            pieces.append(Tensor(np.zeros((1, probe.shape[1]), dtype=probe.dtype)))
    flush()
    return AssembledSequence(concat(pieces, axis=0), lay)


def assemble_batch(projected_rows, layouts, vocab, token_table, missing_fill="token"):
    """Batched assembly through one gather from a stacked row bank.

    ``projected_rows[m]`` is an (n_m * T, D) tensor holding the projected
    features of the samples that have modality ``m`` (in batch order).
    Returns a (B, S, D) tensor.
    """
    seq_lens = {lay.seq_len for lay in layouts}
    if len(seq_lens) != 1:
        raise ShapeError(f"assemble_batch: layouts disagree on length {sorted(seq_lens)}")
    V, D = token_table.shape
    parts = [token_table, Tensor(np.zeros((1, D), dtype=token_table.dtype))]
    offset = {}
    cursor = V + 1
    for m in MODALITIES:
        if m in projected_rows:
            offset[m] = cursor
            parts.append(projected_rows[m])
            cursor += projected_rows[m].shape[0]
    bank = concat(parts, axis=0)
    seen = {m: 0 for m in MODALITIES}
    index = np.empty((len(layouts), seq_lens.pop()), dtype=np.int64)
    for b, lay in enumerate(layouts):
        row = []
        for src in token_plan(lay, vocab, missing_fill):
            if src[0] == "tok":
                row.append(src[1])
            elif src[0] == "zero":
                row.append(V)
            else:
                m, t = src[1], src[2]
                row.append(offset[m] + seen[m] * lay.T + t)
        for m in lay.observed:
            seen[m] += 1
        index[b] = row
    for m in projected_rows:
        if seen[m] * layouts[0].T != projected_rows[m].shape[0]:
            raise ShapeError(f"assemble_batch: {projected_rows[m].shape[0]} rows for {m} but layouts need {seen[m]}")
    return gather_rows(bank, index)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def _check_len(H, layout):
    if H.shape[0] != layout.seq_len:
        raise ShapeError(f"hidden states have {H.shape[0]} rows, layout expects {layout.seq_len}")


def extract_missing(H, seq):
    """Hidden rows at each missing block's interior, keyed by modality."""
    lay = seq.layout if isinstance(seq, AssembledSequence) else seq
    _check_len(H, lay)
    return {m: H[lay.interior[m]] for m in lay.missing}


def extract_fusion(H, seq):
    lay = seq.layout if isinstance(seq, AssembledSequence) else seq
    _check_len(H, lay)
    return H[lay.fusion_positions]


def extract_modal_pooled(H, seq):
    """Mean of each block's interior rows, stacked as (v, f, a) -> (3, D)."""
    lay = seq.layout if isinstance(seq, AssembledSequence) else seq
    _check_len(H, lay)
    return matmul(Tensor(pool_matrix(lay, H.dtype)), H)


def pool_matrix(layout, dtype=np.float64):
    P = np.zeros((len(MODALITIES), layout.seq_len), dtype=dtype)
    for i, m in enumerate(MODALITIES):
        P[i, layout.interior[m]] = 1.0 / layout.T
    return P


def content_pool_matrix(layout, dtype=np.float64):
    """(1, S) averaging weights over every non-prompt position."""
    P = np.zeros((1, layout.seq_len), dtype=dtype)
    P[0, layout.prompt_len :] = 1.0 / (layout.seq_len - layout.prompt_len)
    return P


def batch_pool(H, matrices):
    """Apply per-sample pooling matrices (B, R, S) to hidden states (B, S, D)."""
    return matmul(Tensor(np.stack(matrices).astype(H.dtype, copy=False)), H)


def batch_fusion(H, layouts):
    """(B, K, D) fusion-token states from batched hidden states (B, S, D)."""
    b, s, d = H.shape
    idx = np.stack([lay.fusion_positions + i * s for i, lay in enumerate(layouts)])
    return gather_rows(reshape(H, (b * s, d)), idx)


__all__ = [
    "AssembledSequence",
    "CONDITIONS",
    "INCOMPLETE_CONDITIONS",
    "MODALITIES",
    "MaskError",
    "PROMPT_VARIANTS",
    "SequenceLayout",
    "SpecialVocab",
    "all_masks",
    "assemble",
    "assemble_batch",
    "batch_fusion",
    "batch_pool",
    "build_prompt",
    "resolve_prompt",
    "condition_name",
    "content_pool_matrix",
    "extract_fusion",
    "extract_missing",
    "extract_modal_pooled",
    "make_layout",
    "mask_from_condition",
    "pool_matrix",
    "token_plan",
    "validate_mask",
]
