import copy

import numpy as np
import pytest

from edgeseg.config import RunConfig, SynthConfig
from edgeseg.imaging import canny
from edgeseg.nn import Parameter
from edgeseg.numerics import load_tensors
from edgeseg.synth import generate
from edgeseg.trainer import (
    ABLATION_ROWS,
    AdamW,
    BatchSource,
    NumericError,
    ablation_run,
    augment,
    batch_indices,
    build_model,
    evaluate,
    format_table,
    lambda_sweep,
    load_checkpoint,
    save_checkpoint,
    train,
)
from model_fixtures import tiny_config


def tiny_run(steps=6, **train_kw) -> RunConfig:
    cfg = RunConfig(model=tiny_config())
    cfg.synth = SynthConfig(size=32, char_height=(6, 12))
    cfg.train.max_steps = steps
    cfg.train.checkpoint_every = 0
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SynthConfig(size=32, char_height=(6, 12)), 6)


# -- optimizer ------------------------------------------------------------------------


def test_adamw_decoupled_decay_with_zero_grads():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
    for k in range(1, 4):
        p.grad = np.zeros(3)
        opt.step()
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 0.5]) * 0.95 ** k, rtol=1e-6)


def test_adamw_hand_computed_first_step():
    p = Parameter(np.array([1.0]))
    opt = AdamW([("p", p)], lr=0.01, weight_decay=0.1)
    p.grad = np.array([0.5])
    opt.step()
    # bias-corrected m/sqrt(v) = g/|g| = 1 on the first step
    assert p.data[0] == pytest.approx(1.0 * (1 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8), rel=1e-6)


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    grads = rng.standard_normal((6, 5))
    p = Parameter(w0.copy().astype(np.float32))
    opt = AdamW([("p", p)], lr=1e-2, weight_decay=0.01)
    tp = torch.nn.Parameter(torch.tensor(w0, dtype=torch.float32))
    topt = torch.optim.AdamW([tp], lr=1e-2, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        p.grad = g.astype(np.float32)
        opt.step()
        tp.grad = torch.tensor(g, dtype=torch.float32)
        topt.step()
    np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=1e-5, atol=1e-7)


def test_moment_shapes_match_parameters():
    model = build_model(tiny_config(), 0)
    opt = AdamW(model.named_parameters(), 1e-3, 0.0)
    for name, p in model.named_parameters():
        assert opt.m[name].shape == p.shape == opt.v[name].shape


# -- batches and augmentation -------------------------------------------------------


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 2, 0, s) for s in range(5)])
    assert sorted(seen) == list(range(10))
    np.testing.assert_array_equal(batch_indices(10, 2, 0, 3), batch_indices(10, 2, 0, 3))
    assert not np.array_equal(np.concatenate([batch_indices(10, 2, 1, s) for s in range(5)]), seen)


def test_augment_applies_same_transform_to_image_and_mask():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    text = img[..., 0] > 128
    for seed in range(10):
        a_img, a_txt = augment(img, text, np.random.default_rng(seed), True, True, 4)
        assert a_img.shape == img.shape and a_txt.shape == text.shape
        np.testing.assert_array_equal(a_txt, a_img[..., 0] > 128)


def test_augmented_batches_recompute_canny(tiny_data):
    cfg = tiny_run(augment_crop=True, augment_flip=True)
    imgs, edges, texts, areas = BatchSource(tiny_data, cfg).get(3)
    for img, e, t, a in zip(imgs, edges, texts, areas):
        np.testing.assert_array_equal(e, canny(img, 100, 200))
        assert not (t & ~a).any()


def test_unaugmented_batches_are_raw_samples(tiny_data):
    cfg = tiny_run(augment_crop=False, augment_flip=False)
    imgs, _, texts, _ = BatchSource(tiny_data, cfg).get(0)
    idx = batch_indices(len(tiny_data), cfg.train.batch_size, cfg.train.seed, 0)
    np.testing.assert_array_equal(imgs, tiny_data.images[idx])
    np.testing.assert_array_equal(texts, tiny_data.text_masks[idx])


# -- training -------------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(tiny_data):
    cfg = tiny_run(steps=3, learning_rate=0.0)
    model = build_model(cfg.model, 0)
    before = copy.deepcopy(model.state_dict())
    res = train(tiny_data, cfg, model=model)
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_same_seed_same_losses(tiny_data):
    a = train(tiny_data, tiny_run()).history
    b = train(tiny_data, tiny_run()).history
    assert a == b
    c = train(tiny_data, tiny_run(seed=1)).history
    assert a != c


def test_log_lines(tiny_data):
    lines = []
    train(tiny_data, tiny_run(steps=2), log=lines.append)
    assert len(lines) == 2
    step, seg, det, total = lines[1].split()
    assert int(step) == 1
    assert float(total) == pytest.approx(float(seg) + float(det), rel=1e-6)


def test_checkpoint_resume_matches_uninterrupted(tiny_data, tmp_path):
    cfg = tiny_run(steps=4)
    full = train(tiny_data, cfg)
    half_cfg = tiny_run(steps=2)
    half = train(tiny_data, half_cfg)
    save_checkpoint(tmp_path / "half.ckpt", cfg, half.model, half.optimizer)
    cfg2, model, opt = load_checkpoint(tmp_path / "half.ckpt")
    assert opt.t == 2
    rest = train(tiny_data, cfg2, model=model, opt=opt)
    assert half.history + rest.history == full.history
    for k, v in full.model.state_dict().items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_checkpoint_contents(tiny_data, tmp_path):
    cfg = tiny_run(steps=2, checkpoint_every=1)
    train(tiny_data, cfg, out_dir=tmp_path)
    assert {p.name for p in tmp_path.glob("*.ckpt")} == {"step_000001.ckpt", "step_000002.ckpt", "final.ckpt"}
    state = load_tensors(tmp_path / "final.ckpt")
    assert state["opt.step"] == 2
    assert any(k.startswith("param/") for k in state) and any(k.startswith("opt.m/") for k in state)


def test_non_finite_loss_aborts_with_step_and_term(tiny_data):
    cfg = tiny_run(steps=3)
    model = build_model(cfg.model, 0)
    model.decoder.classify.bias.data[...] = np.nan
    with pytest.raises(NumericError, match=r"non-finite seg loss \(nan\) at step 0"):
        train(tiny_data, cfg, model=model)


def test_non_finite_total_is_named(tiny_data):
    cfg = tiny_run(steps=3, lam=float("inf"))
    cfg.model.edge_guidance = False
    with pytest.raises(NumericError, match="non-finite total loss"):
        train(tiny_data, cfg)


def test_data_size_must_match_model(tiny_data):
    cfg = tiny_run()
    cfg.model.image_size = 64
    with pytest.raises(ValueError, match="model expects"):
        train(tiny_data, cfg)


def test_single_sample_overfit_loss_decreases():
    data = generate(SynthConfig(size=32, char_height=(8, 14), thin_stroke_prob=0.0, stroke_width=(3, 4)), 1)
    cfg = tiny_run(steps=300, batch_size=1, augment_crop=False, augment_flip=False, learning_rate=1e-3)
    losses = np.array([h[3] for h in train(data, cfg).history])
    warm = 50
    for t in range(warm, len(losses) - 50):
        assert losses[t + 50] <= losses[t] + 1e-3, t
    assert losses[-1] < 0.5 * losses[0]


# -- harnesses ------------------------------------------------------------------------


def test_lambda_sweep_rows_and_single_value(tiny_data):
    cfg = tiny_run(steps=2)
    rows = lambda_sweep(tiny_data, tiny_data, cfg, [0.1, 1.0])
    assert [r.label for r in rows] == ["0.1", "1"]
    single = lambda_sweep(tiny_data, tiny_data, cfg, [1.0])[0]
    rep = evaluate(train(tiny_data, cfg).model, tiny_data)
    assert single.fgIoU == rep.fgIoU and single.f_score == rep.f_score
    with pytest.raises(ValueError):
        lambda_sweep(tiny_data, tiny_data, cfg, [])


def test_ablation_row_order_and_seed_mean(tiny_data):
    cfg = tiny_run(steps=1)
    rows = ablation_run(tiny_data, tiny_data, cfg, seeds=(0, 1))
    assert [r.label for r in rows] == ["(.,.)", "EF", "EG", "EF+EG"] == [r[0] for r in ABLATION_ROWS]
    for r in rows:
        assert len(r.per_seed) == 2
        assert r.fgIoU == pytest.approx(np.mean([s[1] for s in r.per_seed]))
    table = format_table(rows, "EF/EG")
    assert len(table.splitlines()) == 5
