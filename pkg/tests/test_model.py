import dataclasses

import numpy as np
import pytest

from gano import tensor as T
from gano.config import ConfigError, ModelConfig, TrainConfig
from gano.data import Clip, Detection, SynthConfig, generate_synthetic
from gano.model import FULL_FRAME, GANO, PADDING_CONFIDENCE, load_checkpoint, roi_cell_weights, save_checkpoint
from gano.tensor import Tensor

TINY = ModelConfig(d_model=16, heads=2, box_hidden=8, queries=4)


@pytest.fixture(scope="module")
def clips():
    return generate_synthetic(3, 4, SynthConfig(jitter=0.05)).clips


def test_tokenizer_grid():
    model = GANO(TINY)
    tokens = model.tokenize(np.zeros((1, 3, 8, 32, 32)))
    assert tokens.shape == (1, 64, 16)
    assert model.cfg.token_grid == (4, 4, 4)


def test_zero_frames_give_equal_tokens():
    tokens = GANO(TINY).tokenize(np.zeros((1, 3, 8, 32, 32))).data[0]
    assert np.array_equal(tokens, np.broadcast_to(tokens[0], tokens.shape))


def test_indivisible_extent_reports_padding():
    with pytest.raises(ConfigError, match="add 3 more"):
        dataclasses.replace(TINY, height=29).validate()


def test_gradient_reaches_frames(clips):
    model = GANO(TINY)
    frames = Tensor(np.stack([c.frames for c in clips[:1]]), requires_grad=True)
    x = T.conv3d(frames, model.patch_weight, model.patch_bias, TINY.patch_stride)
    (x * x).sum().backward()
    assert np.abs(frames.grad).max() > 0


def test_encoder_depth_zero_is_identity():
    model = GANO(dataclasses.replace(TINY, encoder_depth=0))
    tokens = Tensor(np.random.default_rng(0).normal(size=(1, 64, 16)))
    out, grid = model.encode(tokens)
    assert np.array_equal(out.data, tokens.data) and grid == (4, 4, 4)


def test_encoder_stride_one_preserves_count():
    model = GANO(dataclasses.replace(TINY, kv_pool_stride=(1, 1, 1)))
    out, grid = model.encode(Tensor(np.random.default_rng(0).normal(size=(1, 64, 16))))
    assert out.shape == (1, 64, 16) and grid == (4, 4, 4)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradcheck(seed):
    cfg = ModelConfig(frames=2, height=16, width=16, d_model=6, heads=2, box_hidden=3, queries=2, encoder_depth=2)
    model = GANO(cfg, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 4, 6)), True)
    R = Tensor(rng.normal(size=(1, 4, 6)))
    params = [p for b in model.encoder for p in b.parameters()] + model.encoder_norm.parameters()
    assert T.grad_check(lambda x, *_: (model.encode(x)[0] * R).sum(), [x, *params]) <= 1e-4


# -- ROI queries --------------------------------------------------------------------


def test_roi_left_half_of_two_by_two():
    w = roi_cell_weights((0.25, 0.5, 0.5, 1.0), (2, 2))
    np.testing.assert_array_equal(w.reshape(2, 2), [[0.5, 0.0], [0.5, 0.0]])


def test_roi_nearest_cell_fallback():
    w = roi_cell_weights((0.9, 0.1, 0.05, 0.05), (4, 4))
    assert w.sum() == 1.0 and w.reshape(4, 4)[0, 3] == 1.0


def test_roi_centre_on_edge_is_inside():
    # cell centres at 0.25 and 0.75; box edge exactly at 0.75
    w = roi_cell_weights((0.5, 0.5, 0.5, 0.5), (2, 2))
    np.testing.assert_array_equal(w, 0.25)


def test_uniform_memory_gives_uniform_queries(clips):
    model = GANO(TINY)
    batch = model.collate(clips[:2])
    u = np.random.default_rng(0).normal(size=16)
    memory = Tensor(np.broadcast_to(u, (2, 64, 16)).copy())
    q = model.build_queries(memory, (4, 4, 4), batch).data
    for b in range(2):
        for k in np.flatnonzero(batch.is_roi[b]):
            np.testing.assert_allclose(q[b, k], u, atol=1e-12)


def test_no_detections_gives_all_learnable_queries(clips):
    clip = dataclasses.replace(clips[0], detections=[])
    model = GANO(TINY)
    batch = model.collate([clip])
    assert not batch.is_roi.any()
    q = model.build_queries(Tensor(np.zeros((1, 64, 16))), (4, 4, 4), batch).data
    np.testing.assert_array_equal(q[0], model.query_embed.data)


def test_excess_detections_truncated_by_score(clips):
    last = TINY.frames - 1
    dets = [Detection(last, (0.1 + 0.15 * i, 0.5, 0.1, 0.1), i % 3, score=0.1 * (i + 1)) for i in range(6)]
    clip = dataclasses.replace(clips[0], detections=dets)
    batch = GANO(TINY).collate([clip])
    assert batch.is_roi.all()
    np.testing.assert_allclose(sorted(batch.roi_scores[0]), [0.3, 0.4, 0.5, 0.6])


# -- predictions ----------------------------------------------------------------------


@pytest.mark.parametrize("predict_boxes", [False, True])
def test_prediction_contract(clips, predict_boxes):
    model = GANO(dataclasses.replace(TINY, predict_boxes=predict_boxes))
    preds = model.predict(clips)
    assert len(preds) == len(clips)
    for ps in preds:
        assert len(ps) == TINY.queries
        for p in ps:
            assert all(0.0 <= v <= 1.0 for v in p.box)
            assert p.ttc > 0
            assert 0 < p.confidence <= 1
            assert abs(p.verb_probs.sum() - 1) < 1e-12


def test_detector_mode_copies_detector_outputs(clips):
    model = GANO(TINY)
    preds = model.predict(clips[:1])[0]
    last = [d for d in clips[0].detections if d.frame == TINY.frames - 1]
    roi = [p for p in preds if p.roi_backed]
    assert sorted(p.box for p in roi) == sorted(d.box for d in last)
    assert all(p.confidence == 1.0 for p in roi)
    pad = [p for p in preds if not p.roi_backed]
    assert all(p.box == FULL_FRAME and p.noun == -1 and p.confidence == PADDING_CONFIDENCE for p in pad)


def test_forward_deterministic(clips):
    a = GANO(TINY, seed=4).predict(clips)
    b = GANO(TINY, seed=4).predict(clips)
    assert [[(p.box, p.ttc, p.verb, p.confidence) for p in ps] for ps in a] == [
        [(p.box, p.ttc, p.verb, p.confidence) for p in ps] for ps in b
    ]


@pytest.mark.parametrize("fusion", ["guided", "concat"])
def test_detection_order_does_not_matter(clips, fusion):
    model = GANO(dataclasses.replace(TINY, fusion=fusion))
    clip = clips[1]
    shuffled = dataclasses.replace(clip, detections=list(reversed(clip.detections)))
    a = model.forward([clip])
    b = model.forward([shuffled])
    assert np.array_equal(a.ttc.data, b.ttc.data)
    assert np.array_equal(a.verb_logits.data, b.verb_logits.data)


def test_frame_shape_mismatch(clips):
    with pytest.raises(ConfigError):
        GANO(dataclasses.replace(TINY, frames=4, patch_kernel=(2, 8, 8))).collate(clips[:1])


def test_fusion_modes_share_stage_parameters():
    models = {f: GANO(dataclasses.replace(TINY, fusion=f), seed=2) for f in ("guided", "concat", "none")}
    counts = {f: m.stage_parameters() for f, m in models.items()}
    shared = set(counts["none"])
    for f in ("guided", "concat"):
        assert set(counts[f]) - shared == {"fusion"}
        assert {k: counts[f][k] for k in shared} == counts["none"]
    ref = dict(models["none"].named_parameters())
    for f in ("guided", "concat"):
        for name, p in models[f].named_parameters():
            if not name.startswith("fusion."):
                assert np.array_equal(p.data, ref[name].data)


@pytest.mark.parametrize("seed", range(5))
def test_heads_gradcheck(clips, seed):
    cfg = dataclasses.replace(TINY, d_model=6, heads=2, predict_boxes=True, queries=3)
    model = GANO(cfg, seed)
    batch = model.collate(clips[:2])
    rng = np.random.default_rng(seed)
    h = Tensor(rng.normal(size=(2, 3, 6)), True)
    Rs = [Tensor(rng.normal(size=s)) for s in [(2, 3, 6), (2, 3, 4), (2, 3, 4), (2, 3)]]
    params = [*model.noun_head.parameters(), *model.verb_head.parameters(), *model.box_head.parameters(),
              *model.ttc_head.parameters(), model.query_ref]

    def f(h, *_):
        outs = model.heads(h, batch)
        return sum(((o * r).sum() for o, r in zip(outs, Rs)), Tensor(0.0))

    assert T.grad_check(f, [h, *params]) <= 1e-4


def test_checkpoint_round_trip(tmp_path, clips):
    model = GANO(dataclasses.replace(TINY, fusion="concat"), seed=9)
    model.verb_head.bias.data = model.verb_head.bias.data + 1.0
    save_checkpoint(tmp_path / "ck", model, TrainConfig(epochs=3))
    loaded, train_cfg = load_checkpoint(tmp_path / "ck")
    assert loaded.cfg == model.cfg and train_cfg.epochs == 3 and loaded.seed == 9
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert np.array_equal(model.forward(clips).ttc.data, loaded.forward(clips).ttc.data)


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck", GANO(TINY))
    text = (tmp_path / "ck" / "config.txt").read_text().replace("d_model = 16", "d_model = 8")
    (tmp_path / "ck" / "config.txt").write_text(text)
    with pytest.raises(ConfigError, match="shape"):
        load_checkpoint(tmp_path / "ck")


def test_overfit_single_clip(clips):
    from gano.train import train
    from gano.data import Dataset

    cfg = dataclasses.replace(TINY, predict_boxes=True)
    ds = Dataset(clips[:1], 5, 4)
    model = train(ds, cfg, TrainConfig(epochs=40, lr=0.1, grad_clip=1.0, batch_size=1)).model
    best = max(model.predict(clips[:1])[0], key=lambda p: p.confidence)
    assert (best.noun, best.verb) == (clips[0].target.noun, clips[0].target.verb)
