import numpy as np
import pytest
import torch

import gazevla.backbone as bb
from gazevla.tokenizers import ACT_START_ID, PAD_ID, TextVocab, VocabLayout

AID = VocabLayout().action_offset + 10


def tiny_config(**kw):
    defaults = dict(
        d_model=32, n_layers=2, n_heads=2, ffn_mult=2, max_seq_len=40,
        recon_head_dim=8, instr_len=8, image_size=16, patch_size=8,
    )
    defaults.update(kw)
    return bb.ModelConfig(**defaults)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return bb.VLAModel(tiny_config()).eval()


def rand_img(seed, size=16):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def make_seq(model, seed=0, instr="flip the red cup", prefix=(ACT_START_ID,)):
    vocab = TextVocab(model.layout)
    return model.assemble_sequence(
        vocab.encode(instr), rand_img(seed), rand_img(seed + 1), list(prefix)
    )


def test_vocab_size_single_source_of_truth():
    layout = VocabLayout()
    cfg = tiny_config()
    assert cfg.vocab_size == layout.vocab_size
    with pytest.raises(ValueError):
        bb.VLAModel(tiny_config(vocab_size=layout.vocab_size + 1))


def test_assemble_segment_boundaries(tiny_model):
    seq = make_seq(tiny_model, prefix=[ACT_START_ID, AID, AID + 1])
    cfg = tiny_model.config
    per_view = cfg.tokens_per_view
    assert seq.spans["instr"] == (0, cfg.instr_len)
    assert seq.spans["img_base"] == (cfg.instr_len, cfg.instr_len + per_view)
    assert seq.spans["img_wrist"] == (cfg.instr_len + per_view, cfg.instr_len + 2 * per_view)
    assert seq.spans["act"] == (cfg.instr_len + 2 * per_view, cfg.instr_len + 2 * per_view + 3)
    assert len(seq) == cfg.instr_len + 2 * per_view + 3
    # segments appear in the mandated order
    first_idx = {name: seq.segment.index(name) for name in ("instr", "img_base", "img_wrist", "act")}
    assert first_idx["instr"] < first_idx["img_base"] < first_idx["img_wrist"] < first_idx["act"]


def test_assemble_empty_prefix_ends_at_wrist(tiny_model):
    seq = make_seq(tiny_model, prefix=())
    assert len(seq) == seq.spans["img_wrist"][1]
    assert seq.spans["act"][0] == seq.spans["act"][1]


def test_assemble_mask_exactly_causal(tiny_model):
    seq = make_seq(tiny_model)
    L = len(seq)
    for i in range(L):
        for j in range(L):
            assert seq.mask[i, j].item() == (j <= i)


def test_sequence_too_long(tiny_model):
    with pytest.raises(bb.SequenceTooLong):
        make_seq(tiny_model, prefix=[ACT_START_ID] * 30)
    vocab = TextVocab(tiny_model.layout)
    with pytest.raises(bb.SequenceTooLong):
        tiny_model.assemble_sequence(
            vocab.encode("put the red block into the blue bowl then flip the red cup"),
            rand_img(0), rand_img(1), [],
        )


def test_forward_shapes(tiny_model):
    seq = make_seq(tiny_model, prefix=[ACT_START_ID, AID, AID + 1, AID + 2])
    out = tiny_model.forward(seq)
    cfg = tiny_model.config
    assert out.action_logits.shape == (4, cfg.vocab_size)
    assert out.h_R.shape == (cfg.n_image_tokens, cfg.recon_head_dim)
    assert out.attn is None
    with pytest.raises(bb.AttentionNotRetained):
        out.attention()


def test_causality_bit_exact(tiny_model):
    torch.manual_seed(1)
    seq = make_seq(tiny_model, prefix=[ACT_START_ID, AID, AID + 1, AID + 2])
    base = tiny_model.forward(seq)
    a0 = seq.spans["act"][0]
    for trial in range(10):
        perturbed = seq.embeddings.clone()
        p = a0 + 1 + trial % 3
        perturbed[p:] += torch.randn_like(perturbed[p:])
        seq2 = bb.TokenSequence(perturbed, seq.segment, seq.mask, seq.spans)
        out = tiny_model.forward(seq2)
        n_before = p - a0
        assert torch.equal(out.action_logits[:n_before], base.action_logits[:n_before])
        assert torch.equal(out.h_R, base.h_R)  # image positions precede all act positions


def test_autoregressive_consistency_bitwise(tiny_model):
    vocab = TextVocab(tiny_model.layout)
    instr = torch.tensor([tiny_model.pad_instruction(vocab.encode("flip the red cup"))])
    base = torch.from_numpy(rand_img(3)).unsqueeze(0)
    wrist = torch.from_numpy(rand_img(4)).unsqueeze(0)
    with torch.no_grad():
        decoded = tiny_model.greedy_decode_batch(instr, base, wrist, n_steps=4)
        teacher_act = torch.cat(
            [torch.tensor([[ACT_START_ID]]), decoded[:, :3]], dim=1
        )
        teacher = tiny_model.forward_batch(instr, base, wrist, teacher_act)
        # free-running pass i: prefix filled up to slot i, PAD beyond
        for i in range(4):
            act = torch.full((1, 4), PAD_ID, dtype=torch.long)
            act[0, 0] = ACT_START_ID
            act[0, 1:i + 1] = decoded[0, :i]
            free = tiny_model.forward_batch(instr, base, wrist, act)
            assert torch.equal(
                free["action_logits"][0, i], teacher["action_logits"][0, i]
            ), f"step {i} logits differ"
        # greedy path equals teacher-forced argmax path
        masked = tiny_model.mask_to_action_range(teacher["action_logits"])
        assert torch.equal(masked.argmax(dim=-1)[0], decoded[0])


def test_decode_stays_in_action_range(tiny_model):
    layout = tiny_model.layout
    vocab = TextVocab(layout)
    instr = torch.tensor([tiny_model.pad_instruction(vocab.encode("flip the red cup"))])
    base = torch.from_numpy(rand_img(5)).unsqueeze(0)
    wrist = torch.from_numpy(rand_img(6)).unsqueeze(0)
    ids = tiny_model.greedy_decode_batch(instr, base, wrist, n_steps=4)[0]
    for t in ids.tolist():
        assert layout.is_action_id(t)


def test_predict_actions_in_range(tiny_model):
    a = bb.predict_actions(tiny_model, rand_img(7), rand_img(8), "flip the red cup")
    v = a.as_vector()
    assert (v >= -1).all() and (v <= 1).all()
    b = bb.predict_actions(tiny_model, rand_img(7), rand_img(8), "flip the red cup")
    assert np.array_equal(a.as_vector(), b.as_vector())


def test_instruction_changes_h_R(tiny_model):
    vocab = TextVocab(tiny_model.layout)
    imgs = (rand_img(9), rand_img(10))
    out1 = tiny_model.forward(tiny_model.assemble_sequence(
        vocab.encode("flip the red cup"), *imgs, [ACT_START_ID]))
    out2 = tiny_model.forward(tiny_model.assemble_sequence(
        vocab.encode("flip the blue cup"), *imgs, [ACT_START_ID]))
    assert (out1.h_R - out2.h_R).abs().max() > 1e-6


def test_zero_recon_head_gives_zero_h_R(tiny_model):
    with torch.no_grad():
        tiny_model.recon_head.weight.zero_()
        tiny_model.recon_head.bias.zero_()
    out = tiny_model.forward(make_seq(tiny_model, seed=11))
    assert torch.equal(out.h_R, torch.zeros_like(out.h_R))


def test_attention_maps_rows_normalized(tiny_model):
    seq = make_seq(tiny_model, prefix=[ACT_START_ID, AID])
    attn = bb.attention_maps(tiny_model, seq)
    cfg = tiny_model.config
    L = len(seq)
    assert attn.shape == (cfg.n_layers, cfg.n_heads, L, L)
    sums = attn.sum(dim=-1)
    assert ((sums - 1).abs() < 1e-5).all()
    # future entries exactly zero
    for i in range(L):
        assert torch.equal(attn[..., i, i + 1:], torch.zeros_like(attn[..., i, i + 1:]))


def test_attention_single_token():
    torch.manual_seed(0)
    model = bb.VLAModel(tiny_config())
    x = torch.randn(1, 1, model.config.d_model)
    _, attn = model._run(x, retain=True)
    assert torch.equal(attn, torch.ones(1, model.config.n_layers, model.config.n_heads, 1, 1))


def test_crop_view_adds_sixteen_tokens():
    torch.manual_seed(0)
    model = bb.VLAModel(bb.ModelConfig(
        d_model=32, n_layers=1, n_heads=2, max_seq_len=256, recon_head_dim=8,
        instr_len=8, use_crop_input=True,
    )).eval()
    vocab = TextVocab(model.layout)
    crop = np.zeros((32, 32, 3), dtype=np.uint8)
    seq = model.assemble_sequence(
        vocab.encode("flip the red cup"), rand_img(0, 64), rand_img(1, 64),
        [ACT_START_ID], crop_image=crop,
    )
    assert seq.spans["img_crop"][1] - seq.spans["img_crop"][0] == 16
    assert seq.spans["img_crop"][0] == seq.spans["img_wrist"][1]
    assert seq.spans["act"][0] == seq.spans["img_crop"][1]
    out = model.forward(seq)
    assert out.h_R.shape[0] == model.config.n_image_tokens  # crop tokens excluded from h_R


def test_batch_matches_single(tiny_model):
    vocab = TextVocab(tiny_model.layout)
    instr_text = "flip the blue cup"
    base_np, wrist_np = rand_img(20), rand_img(21)
    prefix = [ACT_START_ID, AID, AID + 1, AID + 2]
    seq = tiny_model.assemble_sequence(vocab.encode(instr_text), base_np, wrist_np, prefix)
    single = tiny_model.forward(seq)
    instr = torch.tensor([tiny_model.pad_instruction(vocab.encode(instr_text))])
    batch = tiny_model.forward_batch(
        instr,
        torch.from_numpy(base_np).unsqueeze(0),
        torch.from_numpy(wrist_np).unsqueeze(0),
        torch.tensor([prefix]),
    )
    assert torch.allclose(single.action_logits, batch["action_logits"][0], atol=1e-6)
    assert torch.allclose(single.h_R, batch["h_R"][0], atol=1e-6)
