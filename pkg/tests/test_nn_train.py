import math

import numpy as np
import pytest

from fwl.core import FwlFrame, LabelVolume, PeakClass, PeakTable, Pose, SensorConfig, peaks_to_points
from fwl.nn import autograd as ag
from fwl.nn.autograd import Tensor
from fwl.nn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from fwl.nn.losses import focal_loss, mae_loss, peak_targets
from fwl.nn.model import MaeConfig, TrainConfig, init_head, init_params, is_encoder_param
from fwl.nn.optim import AdamW, adamw_step, adamw_update
from fwl.nn.train import (finetune, infer, labels_from_probs, peak_label_lookup, predict_probs, pretrain,
                          remove_ghosts)
from fwl.io import FormatError
from fwl.signal import PreprocessSpec, detect_frame_peaks

from .gradcheck import check_grad


def small_cfg(**kw):
    base = dict(patch=(4, 4, 16), input_hw=(8, 8), input_T=16, d_enc=12, d_dec=6, heads=3,
                blocks_enc=2, blocks_dec=2, K=2)
    base.update(kw)
    return MaeConfig(**base)


def gauss(T, mu, a, sigma=1.5):
    t = np.arange(T)
    return a * np.exp(-(t - mu) ** 2 / (2 * sigma ** 2))


def toy_volumes(n, cfg, seed=0):
    rng = np.random.default_rng(seed)
    H, W = cfg.input_hw
    T = cfg.input_T
    out = []
    for _ in range(n):
        v = np.zeros((H, W, T))
        mu = rng.uniform(3, T - 4)
        slope = rng.uniform(-0.3, 0.3)
        for r in range(H):
            for c in range(W):
                v[r, c] = gauss(T, mu + slope * c, rng.uniform(2, 4))
        out.append(v)
    return out


# -- peak targets -------------------------------------------------------------

def test_peak_targets_identical_single_peak():
    cfg = small_cfg(K=4)
    vol = np.tile(gauss(16, 7.3, 3.0), (8, 8, 1))
    pos, amp, wid = peak_targets(vol, cfg)
    assert pos.shape == (4, 4)
    np.testing.assert_allclose(pos[:, 0], 7.3, atol=1e-9)
    np.testing.assert_allclose(amp[:, 0], 3.0, rtol=1e-9)
    np.testing.assert_allclose(wid[:, 0], 2 * math.sqrt(2 * math.log(2)) * 1.5, atol=0.1)
    assert np.all(pos[:, 1:] == 0) and np.all(amp[:, 1:] == 0) and np.all(wid[:, 1:] == 0)


def test_peak_targets_empty_patch():
    cfg = small_cfg()
    for arr in peak_targets(np.zeros((8, 8, 16)), cfg):
        assert np.all(arr == 0)


def test_peak_targets_mixed_patch_matches_bruteforce():
    cfg = small_cfg(K=2)
    rng = np.random.default_rng(3)
    vol = np.zeros((8, 8, 16))
    for r in range(8):
        for c in range(8):
            for mu in sorted(rng.choice([3.0, 7.0, 11.0], size=rng.integers(0, 4), replace=False)):
                vol[r, c] += gauss(16, mu + rng.uniform(-0.3, 0.3), rng.uniform(1, 3), 1.0)
    pos, amp, wid = peak_targets(vol, cfg)
    pk = detect_frame_peaks(vol, cfg.peak_threshold)
    for n, (pr, pc) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        acc = np.zeros((3, 2))
        for r in range(pr * 4, pr * 4 + 4):
            for c in range(pc * 4, pc * 4 + 4):
                sel = np.flatnonzero((pk.rows == r) & (pk.cols == c))
                sel = sel[np.argsort(pk.position[sel])][:2]
                for k, j in enumerate(sel):
                    acc[:, k] += pk.position[j], pk.amplitude[j], pk.width[j]
        acc /= 16
        np.testing.assert_allclose(pos[n], acc[0], atol=1e-12)
        np.testing.assert_allclose(amp[n], acc[1], atol=1e-12)
        np.testing.assert_allclose(wid[n], acc[2], atol=1e-12)


# -- losses -------------------------------------------------------------------

def test_mae_loss_perfect_is_zero():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    t = rng.normal(size=(2, 3, 8))
    p = [np.abs(rng.normal(size=(2, 4, 2))) for _ in range(3)]
    loss = mae_loss(Tensor(t), t, Tensor(p[0]), Tensor(p[1]), Tensor(p[2]), *p, cfg)
    assert float(loss.data) == 0.0


def test_mae_loss_unit_mse():
    cfg = small_cfg()
    t = np.zeros((1, 2, 5))
    z = np.zeros((1, 4, 2))
    loss = mae_loss(Tensor(t + 1.0), t, Tensor(z), Tensor(z), Tensor(z), z, z, z, cfg)
    assert float(loss.data) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_mae_loss_equals_sum_of_terms(seed):
    cfg = small_cfg(lambda_p=0.7, lambda_a=1.3, lambda_w=0.5)
    rng = np.random.default_rng(seed)
    r, t = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 8))
    pr = [rng.normal(size=(2, 4, 2)) for _ in range(3)]
    tg = [rng.normal(size=(2, 4, 2)) for _ in range(3)]
    loss = float(mae_loss(Tensor(r), t, *(Tensor(x) for x in pr), *tg, cfg).data)
    mse = sum((a - b) ** 2 for a, b in zip(r.ravel(), t.ravel())) / r.size
    l1 = [sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size for x, y in zip(pr, tg)]
    assert abs(loss - (mse + 0.7 * l1[0] + 1.3 * l1[1] + 0.5 * l1[2])) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_mae_loss_gradient(seed):
    cfg = small_cfg()
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(1, 2, 4))
    tg = [rng.normal(size=(1, 3, 2)) for _ in range(3)]
    pr = [tg[i] + rng.choice([-1, 1], size=tg[i].shape) * rng.uniform(0.1, 1, tg[i].shape) for i in range(3)]
    f = lambda a, b, c, d: mae_loss(a, t, b, c, d, *tg, cfg)
    assert check_grad(f, [rng.normal(size=(1, 2, 4))] + pr) < 1e-4


def _probs(rng, shape, C=4):
    z = rng.normal(size=shape + (C,))
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@pytest.mark.parametrize("seed", range(5))
def test_focal_gamma0_alpha1_is_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    p = _probs(rng, (3, 4, 5))
    y = rng.integers(0, 4, (3, 4, 5))
    ce = -np.mean(np.log(np.take_along_axis(p, y[..., None], -1)))
    fl = float(focal_loss(p, y, (1, 1, 1, 1), 0.0).data)
    assert abs(fl - ce) < 1e-9


def test_focal_closed_forms():
    p = np.array([[0.5, 0.5, 0.0, 0.0]])
    assert float(focal_loss(p, np.array([0]), (1, 1, 1, 1), 0.0).data) == pytest.approx(math.log(2), abs=1e-15)
    p = np.array([[0.05, 0.05, 0.9, 0.0]])
    v = float(focal_loss(p, np.array([2]), (0.05, 0.25, 0.7, 1e-4), 2.0).data)
    assert v == pytest.approx(0.7 * 0.1 ** 2 * -math.log(0.9), rel=1e-12)
    assert v == pytest.approx(7.375e-4, abs=1e-7)
    p = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert float(focal_loss(p, np.array([1])).data) == 0.0


def test_focal_zero_probability_is_finite():
    p = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]), True)
    loss = focal_loss(p, np.array([2]))
    assert np.isfinite(loss.data) and loss.data == pytest.approx(0.7 * -math.log(1e-12))
    loss.backward()
    assert np.all(np.isfinite(p.grad))


def test_focal_ignores_undefined_and_checks_normalization():
    p = np.array([[0.5, 0.5, 0, 0], [0.25] * 4])
    a = float(focal_loss(p, np.array([0, 255]), (1, 1, 1, 1), 0.0).data)
    assert a == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        focal_loss(np.array([[0.5, 0.6, 0, 0]]), np.array([0]))


@pytest.mark.parametrize("seed", range(5))
def test_focal_gradient_through_softmax(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 3, 4))
    y = rng.integers(0, 4, (2, 3))
    assert check_grad(lambda u: focal_loss(ag.softmax(u, -1), y), [z]) < 1e-4


# -- optimizer ----------------------------------------------------------------

def test_adamw_zero_grad_zero_decay_is_identity():
    cfg = TrainConfig(weight_decay=0.0)
    theta = np.array([1.0, -2.0])
    out, _ = adamw_step({"w": theta}, {"w": np.zeros(2)}, cfg, 1)
    np.testing.assert_array_equal(out["w"], theta)


def test_adamw_first_step_closed_form():
    cfg = TrainConfig()
    th = 0.8
    out, _ = adamw_step({"w": np.array(th)}, {"w": np.array(1.0)}, cfg, 1)
    ref = th - cfg.lr * (1.0 / (math.sqrt(1.0) + cfg.eps)) - cfg.lr * cfg.weight_decay * th
    assert float(out["w"]) == pytest.approx(ref, abs=1e-15)


def test_adamw_matches_scalar_reference_over_100_steps():
    cfg = TrainConfig(lr=3e-3)
    rng = np.random.default_rng(0)
    grads = rng.normal(size=100)
    th, m, v = 0.5, 0.0, 0.0
    arr, state = {"w": np.array(0.5)}, None
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        th = th - cfg.lr * mh / (math.sqrt(vh) + cfg.eps) - cfg.lr * cfg.weight_decay * th
        arr, state = adamw_step(arr, {"w": np.array(g)}, cfg, t, state)
    assert abs(float(arr["w"]) - th) < 1e-10


def test_adamw_rejects_nonfinite_with_name():
    p = {"enc.0.attn.qkv.w": Tensor(np.ones(2), True)}
    p["enc.0.attn.qkv.w"].grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="enc.0.attn.qkv.w"):
        AdamW(p, TrainConfig()).step(p)
    with pytest.raises(FloatingPointError, match="head.fc1.b"):
        adamw_step({"head.fc1.b": np.ones(1)}, {"head.fc1.b": np.array([np.inf])}, TrainConfig(), 1)
    with pytest.raises(ValueError):
        adamw_update(np.ones(1), np.ones(1), np.zeros(1), np.zeros(1), 0, TrainConfig())


def test_adamw_decay_is_decoupled():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    out, _ = adamw_step({"w": np.array(2.0)}, {"w": np.array(0.0)}, cfg, 1)
    assert float(out["w"]) == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


# -- training ------------------------------------------------------------------

def test_pretrain_loss_decreases_and_is_reproducible():
    cfg = small_cfg()
    vols = toy_volumes(20, cfg)
    tc = TrainConfig(epochs=10, batch=4, seed=3)
    p1, tr1 = pretrain(vols, cfg, tc)
    means = tr1.epoch_means()
    assert all(b < a for a, b in zip(means, means[1:])), means
    p2, tr2 = pretrain(vols, cfg, tc)
    assert tr1.rows == tr2.rows
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)


def test_pretrain_beats_dataset_mean_on_masked_patches():
    from fwl.nn.model import mae_forward

    cfg = small_cfg()
    vols = toy_volumes(24, cfg, seed=1)
    p, _ = pretrain(vols, cfg, TrainConfig(epochs=40, batch=4, seed=0))
    rng = np.random.default_rng(9)
    mean_vox = np.mean(vols, axis=0)
    model_err, mean_err = [], []
    for v in toy_volumes(8, cfg, seed=2):
        out = mae_forward(p, v, cfg, rng)
        model_err.append(np.mean((out.recon.data - out.target) ** 2))
        mv = ag.patchify(Tensor(mean_vox[None]), cfg.patch).data[0][out.masked[0]]
        mean_err.append(np.mean((mv - out.target[0]) ** 2))
    assert np.mean(model_err) < np.mean(mean_err)


def test_pretrain_divergence_aborts():
    from fwl.nn.train import TrainingDiverged

    cfg = small_cfg()
    vols = [np.full((8, 8, 16), np.inf)]
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        pretrain(vols, cfg, TrainConfig(epochs=1, batch=1))


def test_pretrain_random_crop_for_larger_frames():
    cfg = small_cfg()
    big = [np.random.default_rng(i).poisson(1.0, (12, 16, 16)).astype(float) for i in range(3)]
    _, tr = pretrain(big, cfg, TrainConfig(epochs=1, batch=2))
    assert len(tr.rows) == 2
    with pytest.raises(ValueError):
        pretrain([np.zeros((4, 8, 16))], cfg, TrainConfig(epochs=1))


def _labels_for(v):
    lab = np.full(v.shape, int(PeakClass.NOISE), dtype=np.uint8)
    lab[v > 1.0] = PeakClass.GHOST
    return lab


def test_finetune_freezes_encoder_and_trains_head():
    cfg = small_cfg()
    vols = toy_volumes(8, cfg)
    p, _ = pretrain(vols, cfg, TrainConfig(epochs=1, batch=4))
    before = {k: v.data.copy() for k, v in p.items()}
    head0 = init_head(cfg, 0)
    h0 = {k: v.data.copy() for k, v in head0.items()}
    q, tr = finetune([(v, _labels_for(v)) for v in vols], p, cfg, TrainConfig(epochs=3, batch=4), head=head0)
    for k, v in p.items():
        assert np.array_equal(v.data, before[k])
        if is_encoder_param(k):
            assert q[k] is v
    heads = [k for k in q if k.startswith("head.")]
    assert heads and all(not np.array_equal(q[k].data, h0[k]) for k in heads)
    assert all(q[k].grad is not None and np.linalg.norm(q[k].grad) > 0 for k in heads)
    assert not any(k.startswith(("dec.", "recon", "peak.")) for k in q)


def test_finetune_reproducible():
    cfg = small_cfg()
    vols = toy_volumes(4, cfg)
    p, _ = pretrain(vols, cfg, TrainConfig(epochs=1, batch=4))
    data = [(v, _labels_for(v)) for v in vols]
    a, ta = finetune(data, p, cfg, TrainConfig(epochs=2, batch=2))
    b, tb = finetune(data, p, cfg, TrainConfig(epochs=2, batch=2))
    assert ta.rows == tb.rows
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


# -- inference ------------------------------------------------------------------

def test_labels_from_probs_threshold():
    p = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.2, 0.6, 0.1], [0.5, 0.5, 0, 0]])
    np.testing.assert_array_equal(labels_from_probs(p), [255, 2, 255])
    gt = np.random.default_rng(0).integers(0, 4, (5, 6))
    np.testing.assert_array_equal(labels_from_probs(np.eye(4)[gt]), gt)


def _trained_toy():
    cfg = small_cfg()
    vols = toy_volumes(4, cfg)
    p, _ = pretrain(vols, cfg, TrainConfig(epochs=1, batch=4))
    q, _ = finetune([(v, _labels_for(v)) for v in vols], p, cfg, TrainConfig(epochs=2, batch=4))
    return cfg, q


def test_infer_single_tile_equals_untiled():
    cfg, q = _trained_toy()
    spec = PreprocessSpec(row_crop=0, front_bin_crop=2, target_T=16, tile_hw=8)
    raw = np.random.default_rng(5).poisson(1.0, (8, 8, 30)).astype(float)
    frame = FwlFrame(raw, Pose(), "f")
    lv = infer(frame, q, spec, cfg)
    assert lv.dims == (8, 8, 30)
    sel = lv.t_index_map
    probs = predict_probs(q, raw[None][:, :, :, sel], cfg)[0]
    np.testing.assert_array_equal(lv.labels[:, :, sel], labels_from_probs(probs))
    rest = np.setdiff1d(np.arange(30), sel)
    assert np.all(lv.labels[:, :, rest] == PeakClass.NOISE)


def test_infer_multi_tile_with_row_crop():
    cfg, q = _trained_toy()
    spec = PreprocessSpec(row_crop=1, front_bin_crop=0, target_T=16, tile_hw=8)
    raw = np.random.default_rng(6).poisson(1.0, (12, 13, 20)).astype(float)
    lv = infer(FwlFrame(raw, Pose(), "f"), q, spec, cfg)
    assert lv.dims == (12, 13, 20)
    assert np.all(lv.labels[0] == PeakClass.NOISE) and np.all(lv.labels[-1] == PeakClass.NOISE)
    # first tile equals direct prediction on the same crop
    sel = lv.t_index_map
    direct = labels_from_probs(predict_probs(q, raw[None, 1:9, 0:8][:, :, :, sel], cfg)[0])
    np.testing.assert_array_equal(lv.labels[1:9, 0:8][:, :, sel], direct)


# -- ghost removal ----------------------------------------------------------------

def _ghost_frame():
    cfg = SensorConfig.toy()
    vals = np.zeros((2, 3, cfg.bins))
    vals[0, 0] = gauss(cfg.bins, 30.0, 5.0, 2.0) + gauss(cfg.bins, 70.0, 4.0, 2.0)
    vals[1, 2] = gauss(cfg.bins, 50.0, 3.0, 2.0)
    frame = FwlFrame(vals, Pose(), "g")
    lab = np.full(vals.shape, int(PeakClass.NOISE), dtype=np.uint8)
    lab[0, 0, 27:34] = PeakClass.GLASS
    lab[0, 0, 67:74] = PeakClass.GHOST
    lab[1, 2, 47:54] = PeakClass.OBJECT
    return cfg, frame, LabelVolume(lab)


def test_remove_ghosts_drops_only_ghost_peaks():
    cfg, frame, lv = _ghost_frame()
    from dataclasses import replace
    cfg = replace(cfg, rows=2, cols=3)
    cloud = remove_ghosts(frame, lv, 0.5, cfg)
    assert len(cloud) == 2
    assert sorted(cloud.labels.tolist()) == [PeakClass.OBJECT, PeakClass.GLASS]


def test_remove_ghosts_all_ghost_and_no_ghost():
    from dataclasses import replace
    cfg, frame, _ = _ghost_frame()
    cfg = replace(cfg, rows=2, cols=3)
    all_g = LabelVolume(np.full(frame.dims, int(PeakClass.GHOST), dtype=np.uint8))
    assert len(remove_ghosts(frame, all_g, 0.5, cfg)) == 0
    none = LabelVolume(np.full(frame.dims, int(PeakClass.UNDEFINED), dtype=np.uint8))
    kept = remove_ghosts(frame, none, 0.5, cfg)
    ref = peaks_to_points(detect_frame_peaks(frame, 0.5), frame.pose, cfg)
    np.testing.assert_array_equal(kept.xyz, ref.xyz)


def test_peak_label_lookup_nearest_retained_bin():
    lab = np.full((1, 1, 10), int(PeakClass.NOISE), dtype=np.uint8)
    lab[0, 0, 4] = PeakClass.GHOST
    lv = LabelVolume(lab, np.array([0, 2, 4, 6, 8]))
    got = peak_label_lookup(np.array([4.6, 5.2, 3.1]), np.zeros(3, int), np.zeros(3, int), lv)
    np.testing.assert_array_equal(got, [PeakClass.GHOST, PeakClass.NOISE, PeakClass.GHOST])
    small = LabelVolume(lab[:, :, :5].copy(), np.array([0, 2, 4, 6, 8]))
    small.labels  # downsampled grid: index i covers original bin 2i
    got = peak_label_lookup(np.array([8.4]), np.zeros(1, int), np.zeros(1, int), small)
    assert got[0] == lab[0, 0, 4]


# -- checkpoint ---------------------------------------------------------------------

def test_checkpoint_roundtrip_and_errors():
    cfg = small_cfg()
    p = init_params(cfg, 1)
    p.update(init_head(cfg, 1))
    buf = checkpoint_to_bytes(p, cfg, {"note": "x"})
    assert buf[:4] == b"FWLM"
    q, cfg2, extra = checkpoint_from_bytes(buf)
    assert cfg2 == cfg and extra == {"note": "x"} and list(q) == list(p)
    for k in p:
        np.testing.assert_array_equal(q[k].data, p[k].data.astype(np.float32))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(buf[:-3])
