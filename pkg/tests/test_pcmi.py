import itertools

import numpy as np
import pytest

from limssr import pcmi
from limssr.numerics.tensor import Tensor
from limssr.pcmi import (
    MaskError,
    SpecialVocab,
    all_masks,
    assemble,
    build_prompt,
    extract_fusion,
    extract_missing,
    extract_modal_pooled,
    make_layout,
)

VOCAB = SpecialVocab(4)
D = 6


def embed_fn(ids):
    # token id encoded in the first column so positions can be read back
    out = np.zeros((len(ids), D))
    out[:, 0] = np.asarray(ids, dtype=float)
    return Tensor(out)


def feats(mask, T, rng):
    return {m: Tensor(rng.normal(size=(T, D)) + 100.0) for m, bit in zip("vfa", mask) if bit}


def test_vocab_distinct_and_closed():
    assert len(set(VOCAB.tokens)) == len(VOCAB)
    assert len({VOCAB.start(m) for m in "vfa"} | {VOCAB.end(m) for m in "vfa"}) == 6
    with pytest.raises(KeyError):
        VOCAB.id("unknown-word")


def test_prompt_deterministic_and_none_slot():
    assert build_prompt((1, 0, 1), "full", VOCAB) == build_prompt((1, 0, 1), "full", VOCAB)
    assert VOCAB.id("<miss_none>") in build_prompt((1, 1, 1), "full", VOCAB)


def test_prompt_condition_tokens_differ_same_length():
    a = build_prompt((1, 0, 1), "full", VOCAB)
    b = build_prompt((0, 1, 1), "full", VOCAB)
    assert len(a) == len(b) and a != b
    assert VOCAB.id("<avail_va>") in a and VOCAB.id("<miss_f>") in a
    assert VOCAB.id("<avail_fa>") in b and VOCAB.id("<miss_v>") in b


def test_prompt_variants():
    full = build_prompt((1, 0, 0), "full", VOCAB)
    hidden = build_prompt((1, 0, 0), "no_condition", VOCAB)
    assert build_prompt((1, 0, 0), "none", VOCAB) == []
    assert len(build_prompt((1, 0, 0), "no_task", VOCAB)) < len(full)
    assert VOCAB.id("<cond_hidden>") in hidden
    assert build_prompt((1, 0, 0), "no_condition", VOCAB) == build_prompt((0, 1, 1), "no_condition", VOCAB)
    with pytest.raises(ValueError):
        build_prompt((1, 0, 0), "nope", VOCAB)


@pytest.mark.parametrize("T,K", list(itertools.product([1, 4, 8], [1, 4])))
def test_length_formula_sweep(T, K, rng):
    for mask in all_masks():
        seq = assemble(feats(mask, T, rng), mask, K, embed_fn, VOCAB)
        P = seq.layout.prompt_len
        assert seq.seq_len == P + 3 * (T + 2) + K
        assert seq.embeddings.shape == (seq.seq_len, D)


def test_worked_length_example():
    lay = make_layout((1, 1, 1), 4, 4, list(range(12)))
    assert lay.seq_len == 34


def test_spans_disjoint_and_cover(rng):
    for mask in all_masks():
        lay = make_layout(mask, 3, 2, [0] * 5)
        covered = []
        for m in lay.order:
            a, b = lay.block_spans[m]
            covered += range(a, b)
            assert len(lay.interior[m]) == 3
        covered += list(lay.fusion_positions)
        assert sorted(covered) == list(range(lay.prompt_len, lay.seq_len))


def test_block_order_and_missing_tokens(rng):
    T = 3
    seq = assemble(feats((1, 0, 0), T, rng), (1, 0, 0), 2, embed_fn, VOCAB)
    lay = seq.layout
    assert lay.order == ("v", "f", "a")
    col = seq.embeddings.data[:, 0]
    for m in ("f", "a"):
        assert np.all(col[lay.interior[m]] == VOCAB.missing(m))
        a, b = lay.block_spans[m]
        assert col[a] == VOCAB.start(m) and col[b - 1] == VOCAB.end(m)
    assert np.all(col[lay.interior["v"]] > 50)
    seq2 = assemble(feats((0, 1, 1), T, rng), (0, 1, 1), 2, embed_fn, VOCAB)
    assert seq2.layout.order == ("f", "a", "v")


def test_full_mask_has_no_missing_token(rng):
    seq = assemble(feats((1, 1, 1), 4, rng), (1, 1, 1), 4, embed_fn, VOCAB)
    col = seq.embeddings.data[:, 0]
    assert not set(col.tolist()) & {VOCAB.missing(m) for m in "vfa"}


def test_zero_fill(rng):
    seq = assemble(feats((1, 0, 1), 2, rng), (1, 0, 1), 1, embed_fn, VOCAB, missing_fill="zero")
    assert np.all(seq.embeddings.data[seq.layout.interior["f"]] == 0.0)


def test_assemble_errors(rng):
    with pytest.raises(MaskError):
        assemble(feats((1, 1, 0), 2, rng), (1, 0, 0), 1, embed_fn, VOCAB)
    with pytest.raises(MaskError):
        assemble(feats((1, 0, 0), 2, rng), (1, 1, 0), 1, embed_fn, VOCAB)
    with pytest.raises(MaskError):
        pcmi.validate_mask((0, 0, 0))


def test_assemble_batch_matches_single(rng):
    T = 3
    table = Tensor(rng.normal(size=(len(VOCAB), D)))
    masks = [(1, 0, 1), (0, 1, 0), (1, 1, 1)]
    per = [feats(mk, T, rng) for mk in masks]
    rows = {}
    for m in "vfa":
        have = [p[m].data for p in per if m in p]
        if have:
            rows[m] = Tensor(np.concatenate(have))
    layouts = []
    singles = []
    for mk, p in zip(masks, per):
        s = assemble(p, mk, 2, lambda ids: Tensor(table.data[np.asarray(ids, dtype=int)]), VOCAB)
        layouts.append(s.layout)
        singles.append(s.embeddings.data)
    batch = pcmi.assemble_batch(rows, layouts, VOCAB, table).data
    for b in range(3):
        assert np.array_equal(batch[b], singles[b])


# -- extraction ----------------------------------------------------------------------


def sentinel_H(lay, rng):
    return rng.normal(size=(lay.seq_len, D))


def test_extract_missing_sentinel(rng):
    lay = make_layout((1, 0, 1), 4, 4, [0] * 7)
    H = sentinel_H(lay, rng)
    H[lay.interior["f"]] = 7.25
    out = extract_missing(Tensor(H), lay)
    assert list(out) == ["f"] and out["f"].shape == (4, D)
    assert np.all(out["f"].data == 7.25)
    assert extract_missing(Tensor(sentinel_H(make_layout((1, 1, 1), 4, 4, [0]), rng)),
                           make_layout((1, 1, 1), 4, 4, [0])) == {}


def test_extract_fusion_sentinel(rng):
    lay = make_layout((0, 1, 0), 2, 4, [0] * 3)
    H = sentinel_H(lay, rng)
    H[lay.fusion_positions] = -3.5
    out = extract_fusion(Tensor(H), lay)
    assert out.shape == (4, D) and np.all(out.data == -3.5)
    lay1 = make_layout((0, 1, 0), 2, 1, [0] * 3)
    H1 = sentinel_H(lay1, rng)
    assert np.array_equal(extract_fusion(Tensor(H1), lay1).data[0], H1[-1])


def test_extract_pooled(rng):
    for mask in all_masks():
        lay = make_layout(mask, 5, 2, [0] * 4)
        H = sentinel_H(lay, rng)
        for k, m in enumerate("vfa"):
            H[lay.interior[m]] = 10.0 * (k + 1)
        pooled = extract_modal_pooled(Tensor(H), lay).data
        assert np.allclose(pooled, np.array([[10.0], [20.0], [30.0]]) * np.ones(D), atol=1e-12)
        H = sentinel_H(lay, rng)
        want = np.stack([H[lay.interior[m]].mean(0) for m in "vfa"])
        assert np.allclose(extract_modal_pooled(Tensor(H), lay).data, want, atol=1e-12, rtol=0)
    lay = make_layout((1, 0, 0), 1, 1, [])
    H = sentinel_H(lay, rng)
    pooled = extract_modal_pooled(Tensor(H), lay).data
    assert np.allclose(pooled, H[[lay.interior[m][0] for m in "vfa"]], atol=1e-15)


def test_extract_length_mismatch(rng):
    lay = make_layout((1, 0, 1), 4, 4, [0] * 7)
    with pytest.raises(ValueError, match="rows"):
        extract_fusion(Tensor(np.zeros((lay.seq_len + 1, D))), lay)


def test_extractors_claim_disjoint_positions():
    for mask in all_masks():
        lay = make_layout(mask, 4, 3, [0] * 6)
        claimed = list(lay.fusion_positions) + [i for m in "vfa" for i in lay.interior[m]]
        assert len(claimed) == len(set(claimed))


def test_mask_changes_only_tokens_and_order():
    lays = [make_layout(m, 4, 4, build_prompt(m, "full", VOCAB)) for m in all_masks()]
    assert len({l.seq_len for l in lays}) == 1
    assert len({tuple(l.fusion_positions) for l in lays}) == 1


def test_manifest(tmp_path):
    path = tmp_path / "vocab.json"
    VOCAB.write_manifest(path)
    import json

    man = json.loads(path.read_text())
    assert man["tokens"] == VOCAB.tokens and "full" in man["variants"]
