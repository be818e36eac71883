import hashlib
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from pixeltext.errors import AllZeroRatio, LengthError, MissingModality, NonFiniteGradient, ShapeError, UnknownId
from pixeltext.model import ModelConfig, load_model
from pixeltext.patchio import PatchSequence
from pixeltext.pretrain import (KINDS, VARIANTS, AdamWState, EmptyLossMask, TrainConfig, adamw_step, batch_losses,
                                build_pair_sequence, clip_grad_norm, collate, init_model, lr_at, mix_schedule,
                                next_patch_loss, next_token_loss, pixel_example, sub_seed, text_example, train)
from pixeltext.render import Role
from pixeltext.tokenizer import TokenSequence

TINY = ModelConfig(hidden_size=16, n_layers=2, n_heads=4, n_kv_heads=2, intermediate_size=24, vocab_size=16,
                   max_positions=32, patch_px=2, channels=3)


def patch_seq(rng, n_content, n_eos=1, dim=12):
    px = np.concatenate([rng.random((n_content, dim)) * 0.9 + 0.05, np.zeros((n_eos, dim))])
    roles = np.array([Role.CONTENT] * n_content + [Role.EOS] * n_eos, np.uint8)
    return PatchSequence(px, roles, 2, 3)


def toy_data(seed=0, n=6):
    rng = np.random.default_rng(seed)
    data = {"text": [], "pixel": [], "pair": []}
    for _ in range(n):
        ps = patch_seq(rng, int(rng.integers(1, 5)))
        tk = TokenSequence(rng.integers(0, 16, int(rng.integers(2, 6))))
        data["pixel"].append(pixel_example(ps))
        data["text"].append(text_example(tk, patch_dim=12))
        data["pair"].append(build_pair_sequence(ps, tk))
    return data


# --- losses ------------------------------------------------------------------

def test_patch_loss_examples():
    t = torch.randn(4, 12, dtype=torch.float64)
    mask = torch.tensor([True, False, True, False])
    assert next_patch_loss(t.clone(), t, mask).item() == 0.0
    one = torch.tensor([True, False, False, False])
    assert next_patch_loss(t + 1, t, one).item() == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.booleans(), min_size=5, max_size=5), st.integers(0, 1000))
def test_patch_loss_ignores_masked_targets(mask, seed):
    g = torch.Generator().manual_seed(seed)
    pred, tgt = torch.randn(5, 6, generator=g, dtype=torch.float64), torch.randn(5, 6, generator=g,
                                                                               dtype=torch.float64)
    mask = torch.tensor(mask)
    garbage = tgt.clone()
    garbage[~mask] = torch.randn(int((~mask).sum()), 6, generator=g, dtype=torch.float64) * 1e6
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyLossMask)
        assert next_patch_loss(pred, tgt, mask).item() == next_patch_loss(pred, garbage, mask).item()


@given(st.lists(st.booleans(), min_size=6, max_size=6), st.integers(0, 1000))
def test_token_loss_ignores_masked_targets(mask, seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(6, 9, generator=g, dtype=torch.float64)
    tgt = torch.randint(0, 9, (6,), generator=g)
    mask = torch.tensor(mask)
    garbage = tgt.clone()
    garbage[~mask] = 10 ** 6
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyLossMask)
        assert next_token_loss(logits, tgt, mask).item() == next_token_loss(logits, garbage, mask).item()


def test_token_loss_examples():
    V = 512
    ce = next_token_loss(torch.zeros(3, V, dtype=torch.float64), torch.tensor([0, 5, 511]),
                         torch.ones(3, dtype=torch.bool))
    assert abs(ce.item() - math.log(512)) < 1e-12
    assert round(math.log(512), 4) == 6.2383
    logits = torch.zeros(1, V, dtype=torch.float64)
    logits[0, 7] = 1e4
    assert next_token_loss(logits, torch.tensor([7]), torch.tensor([True])).item() < 1e-12
    ce = next_token_loss(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), torch.tensor([0]),
                         torch.tensor([True]))
    assert ce.item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert round(ce.item(), 4) == 0.5514


def test_loss_errors_and_empty_masks():
    with pytest.raises(UnknownId):
        next_token_loss(torch.zeros(1, 3), torch.tensor([3]), torch.tensor([True]))
    with pytest.raises(ShapeError):
        next_patch_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.ones(2, dtype=torch.bool))
    with pytest.warns(EmptyLossMask):
        assert next_patch_loss(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, dtype=torch.bool)).item() == 0
    with pytest.warns(EmptyLossMask):
        assert next_token_loss(torch.zeros(2, 3), torch.zeros(2), torch.zeros(2, dtype=torch.bool)).item() == 0


# --- sequences ---------------------------------------------------------------

def test_pair_sequence_alignment():
    rng = np.random.default_rng(0)
    ex = build_pair_sequence(patch_seq(rng, 2), TokenSequence([4, 5, 6]))
    assert ex.is_patch.tolist() == [True, True, True, False, False, False]
    assert ex.patch_loss_mask.tolist() == [True, False, False, False, False, False]
    assert ex.token_loss_mask.tolist() == [False, False, True, True, True, False]
    assert ex.token_target[2:5].tolist() == [4, 5, 6]
    assert ex.attention_mask.tolist() == [True, True, False, True, True, True]


def test_pair_sequence_targets_are_normalized_next_patches():
    rng = np.random.default_rng(1)
    ps = patch_seq(rng, 3)
    ex = build_pair_sequence(ps, None)
    x = ps.patches[1].astype(np.float64)
    ref = (x - x.mean()) / np.sqrt(x.var() + 1e-6)
    assert np.allclose(ex.patch_target[0], ref, atol=1e-6)
    assert ex.patch_loss_mask.tolist() == [True, True, False, False]


def test_degenerate_pairs():
    rng = np.random.default_rng(2)
    t = build_pair_sequence(None, TokenSequence([1, 2, 3]), patch_dim=12)
    assert t.kind == "text" and not t.is_patch.any()
    assert t.token_loss_mask.tolist() == [True, True, False]
    p = build_pair_sequence(patch_seq(rng, 3), None)
    assert p.kind == "pixel" and p.is_patch.all() and not p.token_loss_mask.any()


def test_pair_length_error():
    rng = np.random.default_rng(3)
    with pytest.raises(LengthError):
        build_pair_sequence(patch_seq(rng, 5), TokenSequence([1, 2, 3]), max_positions=8)


def test_collate_pads_with_masked_slots():
    data = toy_data()
    batch = collate(data["pair"][:3], 12)
    N = max(len(e) for e in data["pair"][:3])
    assert batch.inputs.shape == (3, N)
    for b, e in enumerate(data["pair"][:3]):
        assert not batch.inputs.attention_mask[b, len(e):].any()
        assert not batch.patch_loss_mask[b, len(e):].any() and not batch.token_loss_mask[b, len(e):].any()


def test_gradient_flow_separation():
    data = toy_data()
    model = init_model(TINY, 0, torch.float64)
    for kind, zero_head, live_head in [("pixel", "classification_head", "regression_head"),
                                       ("text", "regression_head", "classification_head")]:
        model.zero_grad(set_to_none=True)
        sum(batch_losses(model, collate(data[kind], 12, torch.float64)).values()).backward()
        head = getattr(model, zero_head)
        # None means the head is not in the graph at all, which is exactly zero gradient
        for p in (head.weight, head.bias):
            assert p.grad is None or not p.grad.any()
        assert getattr(model, live_head).weight.grad.abs().sum() > 0


# --- schedules ---------------------------------------------------------------

def test_mix_schedule_examples():
    assert set(mix_schedule((1, 0, 0), 50)) == {"text"}
    assert set(mix_schedule((0, 1, 0), 50)) == {"pixel"}
    s = mix_schedule((4, 4, 2), 10)
    assert (s.count("text"), s.count("pixel"), s.count("pair")) == (4, 4, 2)


def test_mix_schedule_errors():
    with pytest.raises(AllZeroRatio):
        mix_schedule((0, 0, 0), 5)
    with pytest.raises(ValueError):
        mix_schedule((1, -1, 0), 5)


def test_mix_schedule_every_window_exhaustive():
    for ratio in [(a, b, c) for a in range(5) for b in range(5) for c in range(4) if a + b + c]:
        w = sum(ratio)
        for seed in range(w + 1):
            s = mix_schedule(ratio, 3 * w + 7, seed)
            for start in range(len(s) - w + 1):
                win = s[start:start + w]
                assert tuple(win.count(k) for k in KINDS) == ratio


def test_variant_ratios():
    assert VARIANTS == {"textgpt": (1, 0, 0), "pixelgpt": (0, 1, 0), "monogpt": (1, 1, 0), "dualgpt": (4, 4, 2)}


def test_lr_schedule():
    cfg = TrainConfig()
    assert (cfg.peak_lr, cfg.warmup_steps, cfg.beta1, cfg.beta2) == (5e-4, 200, 0.9, 0.999)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(200, cfg) == 5e-4
    assert lr_at(100, cfg) == pytest.approx(2.5e-4, rel=1e-12)
    assert lr_at(1100, cfg) == pytest.approx(2.5e-4, rel=1e-12)
    assert lr_at(2000, cfg) == 0.0 and lr_at(5000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=50, steps=10)
    with pytest.raises(ValueError):
        TrainConfig(batch_mix=(1, -1, 0))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"peak_lr": 1e-3, "bogus": 1})


def test_sub_seed_is_documented_hash():
    ref = int.from_bytes(hashlib.sha256(b"42:init").digest()[:8], "little") & ((1 << 63) - 1)
    assert sub_seed(42, "init") == ref
    assert sub_seed(42, "init") != sub_seed(42, "schedule")


# --- optimizer ---------------------------------------------------------------

def test_adamw_zero_gradient_unchanged():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    adamw_step([p], [torch.zeros(2, dtype=torch.float64)], AdamWState(), 0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adamw_single_scalar_step():
    p = torch.tensor([1.0], dtype=torch.float64)
    adamw_step([p], [torch.tensor([1.0], dtype=torch.float64)], AdamWState(), 0.1, eps=0.0)
    assert p.item() == pytest.approx(0.9, abs=1e-12)


def test_adamw_nan_raises_before_mutation():
    p = torch.tensor([1.0, 2.0])
    state = AdamWState()
    with pytest.raises(NonFiniteGradient):
        adamw_step([p, p.clone()], [torch.ones(2), torch.tensor([float("nan"), 0.0])], state, 0.1)
    assert p.tolist() == [1.0, 2.0] and state.step == 0


def test_adamw_matches_torch_reference():
    g = torch.Generator().manual_seed(0)
    ours = [torch.randn(3, 4, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)]
    ref = [t.clone().requires_grad_(True) for t in ours]
    opt = torch.optim.AdamW(ref, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    state = AdamWState()
    for step in range(20):
        grads = [torch.randn(t.shape, generator=g, dtype=torch.float64) for t in ours]
        lr = 0.01 * (step + 1) / 20
        for group in opt.param_groups:
            group["lr"] = lr
        for r, gr in zip(ref, grads):
            r.grad = gr.clone()
        opt.step()
        adamw_step(ours, grads, state, lr, (0.9, 0.999), 1e-8, 0.1)
    for a, b in zip(ours, ref):
        assert torch.allclose(a, b.detach(), atol=1e-12)


def test_clip_grad_norm():
    grads = [torch.tensor([3.0, 0.0], dtype=torch.float64), torch.tensor([4.0], dtype=torch.float64)]
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert math.sqrt(sum((g ** 2).sum().item() for g in grads)) == pytest.approx(1.0, abs=1e-6)
    small = [torch.tensor([0.3])]
    clip_grad_norm(small, 1.0)
    assert small[0].item() == pytest.approx(0.3)


# --- training loop -----------------------------------------------------------

def short_cfg(**kw):
    return TrainConfig(**{**dict(steps=20, warmup_steps=5, batch_size=4, peak_lr=3e-3, seed=1), **kw})


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    model = init_model(TINY, 0)
    recs = train(model, toy_data(), TrainConfig(steps=0, warmup_steps=0), checkpoint_dir=tmp_path)
    assert recs == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_0.ckpt"]
    back, _ = load_model(tmp_path / "step_0.ckpt")
    for a, b in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_reproducible(tmp_path):
    logs = []
    for run in range(2):
        model = init_model(TINY, 3)
        train(model, toy_data(), short_cfg(), checkpoint_dir=tmp_path / str(run),
              log_path=tmp_path / f"{run}.tsv")
        logs.append((tmp_path / f"{run}.tsv").read_text())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert lines[0] == "step\tkind\tloss\tlr\tgrad_norm"
    assert len(lines) == 21
    kinds = [l.split("\t")[1] for l in lines[1:11]]
    assert (kinds.count("text"), kinds.count("pixel"), kinds.count("pair")) == (4, 4, 2)
    assert (tmp_path / "0" / "final.ckpt").exists()


def test_seed_changes_run():
    a = train(init_model(TINY, 3), toy_data(), short_cfg(seed=1))
    b = train(init_model(TINY, 3), toy_data(), short_cfg(seed=2))
    assert [r.loss for r in a] != [r.loss for r in b]


def test_textgpt_never_logs_patch_loss():
    data = toy_data()
    recs = train(init_model(TINY, 0), {"text": data["text"]}, short_cfg(batch_mix=VARIANTS["textgpt"]))
    assert {r.kind for r in recs} == {"text"}
    assert all(set(r.parts) == {"token"} for r in recs)


def test_kinds_restriction():
    recs = train(init_model(TINY, 0), toy_data(), short_cfg(), kinds=["pixel"])
    assert {r.kind for r in recs} == {"pixel"}


def test_missing_modality():
    data = toy_data()
    with pytest.raises(MissingModality):
        train(init_model(TINY, 0), {"text": data["text"], "pixel": data["pixel"]}, short_cfg())


def test_periodic_checkpoints(tmp_path):
    train(init_model(TINY, 0), toy_data(), short_cfg(checkpoint_every=10), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.ckpt", "step_0.ckpt", "step_10.ckpt",
                                                          "step_20.ckpt"]


def test_losses_trend_down():
    recs = train(init_model(TINY, 0), toy_data(n=8), short_cfg(steps=300, warmup_steps=20))
    for kind in KINDS:
        series = [r.loss for r in recs if r.kind == kind]
        assert np.mean(series[-10:]) < np.mean(series[:10])
