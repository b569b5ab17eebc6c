import numpy as np
import pytest
import torch

from umbra_tts.text_frontend import (
    CharVocab,
    TextEmbedder,
    embed_text,
    estimate_target_length,
    extend_with_filler,
    tokenize,
)


@pytest.fixture
def vocab():
    return CharVocab.default()


def test_default_vocab_reserves_filler_and_unk(vocab):
    assert vocab.size == 97
    assert vocab.char_to_id[" "] == 2
    assert vocab.char_to_id["a"] == 2 + ord("a") - 32


def test_tokenize_maps_unknown_to_unk(vocab):
    ids = tokenize("hi é", vocab)
    assert list(ids[:3]) == [vocab.char_to_id["h"], vocab.char_to_id["i"], vocab.char_to_id[" "]]
    assert ids[3] == vocab.unk_id


def test_tokenize_rejects_empty(vocab):
    with pytest.raises(ValueError):
        tokenize("", vocab)


def test_extend_with_filler(vocab):
    z = extend_with_filler(tokenize("abc", vocab), 6, vocab)
    assert z.length == 6
    assert z.char_count == 3
    assert list(z.ids[3:]) == [vocab.filler_id] * 3


def test_extend_exact_length_has_no_filler(vocab):
    z = extend_with_filler(tokenize("abc", vocab), 3, vocab)
    assert vocab.filler_id not in z.ids


def test_extend_rejects_overflow(vocab):
    with pytest.raises(ValueError, match="exceeds mel length"):
        extend_with_filler(tokenize("abcdef", vocab), 5, vocab)


def test_estimate_target_length_examples():
    assert estimate_target_length("abcd", "ab", 100) == 200
    assert estimate_target_length("abc", "abcdefg", 10) == 5
    assert estimate_target_length("a", "abc", 1) == 1


def test_estimate_target_length_matches_ceiling():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s_gen = int(rng.integers(1, 60))
        s_ref = int(rng.integers(1, 60))
        ref_frames = int(rng.integers(1, 500))
        expected = int(np.ceil(ref_frames * s_gen / s_ref - 1e-12))
        assert estimate_target_length("x" * s_gen, "y" * s_ref, ref_frames) == expected


def test_estimate_target_length_errors():
    with pytest.raises(ValueError):
        estimate_target_length("", "abc", 10)
    with pytest.raises(ValueError):
        estimate_target_length("abc", "abc", 0)


def test_vocab_file_roundtrip(temp_dir, vocab):
    path = vocab.save(temp_dir / "vocab.txt")
    lines = path.read_text(encoding="utf-8").split("\n")
    assert lines[0] == "filler=0"
    assert lines[1] == "unk=1"
    assert CharVocab.load(path) == vocab


def test_vocab_load_rejects_bad_header(temp_dir):
    path = temp_dir / "vocab.txt"
    path.write_text("nonsense\n", encoding="utf-8")
    with pytest.raises(ValueError, match="header"):
        CharVocab.load(path)


def test_embedder_shapes(vocab):
    torch.manual_seed(0)
    embedder = TextEmbedder(vocab.size, d_text=16, n_blocks=2)
    z = extend_with_filler(tokenize("hello", vocab), 12, vocab)
    feats = embed_text(z, embedder)
    assert feats.shape == (16, 12)
    assert torch.all(torch.isfinite(feats))


def test_embedder_rejects_out_of_range_ids():
    embedder = TextEmbedder(10, d_text=8)
    with pytest.raises(ValueError, match="out of range"):
        embedder(torch.tensor([[0, 10]]))


def test_embedder_is_local_while_grn_gain_is_zero(vocab):
    torch.manual_seed(0)
    embedder = TextEmbedder(vocab.size, d_text=8, n_blocks=2, kernel_size=3)
    with torch.no_grad():
        for name, p in embedder.named_parameters():
            if not name.endswith("grn.gamma"):
                p.add_(0.1 * torch.randn_like(p))
    radius = embedder.receptive_radius
    assert radius == 2
    a = extend_with_filler(tokenize("abcdefgh", vocab), 20, vocab)
    ids_b = a.ids.copy()
    ids_b[0] = vocab.char_to_id["z"]
    with torch.no_grad():
        fa = embedder(torch.as_tensor(a.ids).unsqueeze(0))[0]
        fb = embedder(torch.as_tensor(ids_b).unsqueeze(0))[0]
    changed = (fa - fb).abs().amax(dim=1) > 0
    assert changed[0]
    assert not changed[radius + 1 :].any()
