import json

import numpy as np
import pytest
import torch

from lcmcodec.networks import CodecModel, ModelConfig
from lcmcodec.nn import load_weights, param_grad_check
from lcmcodec.synth import SynthSceneSpec, neighbor_similarity, synth_cloud
from lcmcodec.training import (
    LAMBDAS,
    RDTerms,
    StageOrderError,
    TrainConfig,
    TrainingDivergence,
    division_proxy_loss,
    lossless_fraction,
    prepare_scene,
    proxy_rd_loss,
    rd_terms,
    step_generator,
    toy_scenes,
    train_stage,
)

TINY = ModelConfig(width=16, heads=2, dgcnn_width=8, knn=4, n_mix=2, geometry_hyper=4, color_hyper=8,
                   lossy_latent=8, lossy_groups=(4, 4), lossy_hyper=4, lossy_width=16, division_width=16)


@pytest.fixture(scope="module")
def scenes():
    return toy_scenes(4, n=128, seed=0, window=64)


@pytest.fixture(scope="module")
def staged(scenes):
    """Weights after each stage of a short run on tiny scenes."""
    out = {}
    store = None
    for stage in ("lossy_init", "lossless_init", "joint"):
        store, hist = train_stage(TrainConfig(stage=stage, steps=6, lr=2e-3, window=64), scenes, store,
                                  model_config=TINY)
        out[stage] = (store, hist)
    return out


# -------------------------------------------------------------- objective


def _terms(d, rates, frac=0.0):
    return RDTerms(torch.tensor(d), {k: torch.tensor(v) for k, v in rates.items()}, torch.tensor(frac))


def test_loss_identities():
    perfect = _terms(0.0, {"geometry": 10.0, "lossless": 30.0})
    assert float(proxy_rd_loss(perfect, 4e-4)) == pytest.approx(4e-4 * 40.0)
    t = _terms(0.25, {"geometry": 10.0, "lossy": 5.0}, frac=0.3)
    assert float(proxy_rd_loss(t, 0.0)) == pytest.approx(0.25)
    assert float(division_proxy_loss(t, 1e-4, 0.0)) == float(proxy_rd_loss(t, 1e-4))
    assert float(division_proxy_loss(t, 1e-4, 2.0)) == pytest.approx(0.25 + 1e-4 * 15.0 + 0.6)


def test_train_config_validation():
    with pytest.raises(ValueError, match="lambda"):
        TrainConfig(lam=3e-4)
    with pytest.raises(ValueError, match="stage"):
        TrainConfig(stage="warmup")
    for lam in LAMBDAS:
        TrainConfig(lam=lam)


def test_rd_terms_sections_and_masks(scenes):
    torch.manual_seed(0)
    model = CodecModel.initialized(TINY, 0)
    lossy = rd_terms(model, scenes[0], step_generator(0, 0), mask_mode="lossy")
    assert set(lossy.rates) == {"geometry", "lossy", "lossless"}
    assert float(lossy.rates["lossless"]) == 0.0 and float(lossy.lossless_fraction) == 0.0
    assert float(lossy.distortion.detach()) > 0
    split = rd_terms(model, scenes[0], step_generator(0, 1), mask_mode="random")
    assert 0 < float(split.lossless_fraction) < 1
    assert float(split.rates["lossless"].detach()) > 0
    with pytest.raises(ValueError):
        rd_terms(model, scenes[0], mask_mode="half")


def test_end_to_end_gradient_double():
    scene = prepare_scene(synth_cloud(SynthSceneSpec(n=32, seed=3)), window=16)
    torch.manual_seed(1)
    model = CodecModel(TINY).double()
    # a soft mask halfway through the threshold keeps both colour paths active
    with torch.no_grad():
        model.division.out.layers[-1].bias.fill_(0.0)

    def loss():
        terms = rd_terms(model, scene, step_generator(0, 0), relax="noise", mask_mode="learned", tau=0.0)
        return division_proxy_loss(terms, 4e-4, 0.1)

    res = param_grad_check(loss, model, samples=40, h=1e-6, floor=1e-6, seed=0)
    assert res.max_rel_error <= 1e-3, sorted(res.errors)[-5:]


def test_every_parameter_gets_a_gradient(scenes):
    torch.manual_seed(2)
    model = CodecModel.initialized(TINY, 2).train()
    with torch.no_grad():  # freshly initialized latents all round to zero otherwise
        model.lossy.analysis_out.layers[-1].weight.mul_(100.0)
    # tau 0 routes everything lossless, the all-lossy pass covers the lossy entropy model
    lossless = rd_terms(model, scenes[1], step_generator(0, 3), relax="ste", mask_mode="learned", tau=0.0)
    lossy = rd_terms(model, scenes[1], step_generator(0, 4), relax="ste", mask_mode="lossy")
    (division_proxy_loss(lossless, 4e-4, 0.5) + proxy_rd_loss(lossy, 4e-4)).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or float(p.grad.abs().sum()) == 0]
    assert dead == []


# ---------------------------------------------------------------- stages


def test_lossy_init_decreases_loss():
    scenes10 = toy_scenes(10, n=96, seed=20, window=96)
    _, hist = train_stage(TrainConfig(stage="lossy_init", steps=200, lr=3e-3, window=96), scenes10,
                          model_config=TINY)
    losses = np.array([r["loss"] for r in hist])
    assert losses[-20:].mean() < 0.8 * losses[:20].mean()


def test_stage_order_enforced(scenes, staged):
    with pytest.raises(StageOrderError, match="lossy_init"):
        train_stage(TrainConfig(stage="lossless_init", steps=1), scenes, model_config=TINY)
    with pytest.raises(StageOrderError, match="lossless_init"):
        train_stage(TrainConfig(stage="joint", steps=1), scenes, staged["lossy_init"][0])


def test_frozen_modules_stay_bit_identical(staged):
    before, after = staged["lossy_init"][0], staged["lossless_init"][0]
    for name in before:
        same = np.array_equal(before[name], after[name])
        trained = name.startswith(("geometry.", "color."))
        assert same != trained or not trained, name
        if name.startswith(("lossy.", "division.")):
            assert same, name
    assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith("color."))


def test_stage_metadata(staged):
    meta = staged["joint"][0].metadata
    assert meta["train"]["completed"] == ["lossy_init", "lossless_init", "joint"]
    assert meta["model"] == TINY.to_dict()
    assert CodecModel.from_store(staged["joint"][0]).architecture_id == CodecModel(TINY).architecture_id


def test_resume_reproduces_next_step(scenes, tmp_path):
    cfg = TrainConfig(stage="lossy_init", steps=8, lr=2e-3, window=64)
    _, full = train_stage(cfg, scenes, model_config=TINY, checkpoint_dir=tmp_path, checkpoint_every=4)
    ckpt = load_weights(tmp_path / "lossy_init_000004.lcmw")
    assert ckpt.metadata["train"]["step"] == 4
    _, resumed = train_stage(cfg, scenes, ckpt)
    assert resumed[0]["step"] == 4
    assert resumed[0]["loss"] == full[4]["loss"]


def test_joint_from_checkpoint_files(staged, tmp_path, scenes):
    from lcmcodec.nn import save_weights

    path = tmp_path / "lossless.lcmw"
    save_weights(staged["lossless_init"][0], path)
    store, hist = train_stage(TrainConfig(stage="joint", steps=2, window=64), scenes, load_weights(path))
    assert len(hist) == 2 and all(np.isfinite(r["loss"]) for r in hist)


def test_log_records(scenes, tmp_path):
    log = tmp_path / "log.jsonl"
    train_stage(TrainConfig(stage="lossy_init", steps=3, window=64), scenes, model_config=TINY, log=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"step", "stage", "loss", "rate_bits", "distortion"}


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_divergence_is_reported(scenes):
    bad = prepare_scene(synth_cloud(SynthSceneSpec(n=64, seed=1)), window=64)
    bad.colors[3, 0] = np.nan
    with pytest.raises(TrainingDivergence) as err:
        train_stage(TrainConfig(stage="lossy_init", steps=3, window=64), [scenes[0], bad], model_config=TINY)
    assert err.value.stage == "lossy_init" and err.value.step == 1


@pytest.mark.slow
def test_lossless_fraction_falls_with_w(staged, scenes):
    # start from a division net that routes everything lossless
    base = staged["lossless_init"][0]
    model = CodecModel.from_store(base)
    with torch.no_grad():
        model.division.out.layers[-1].bias.fill_(3.0)
    init = model.to_store(train=base.metadata["train"])
    assert lossless_fraction(init, scenes) == 1.0
    fractions = []
    for w in (0.0, 0.05, 1.0):
        store, _ = train_stage(TrainConfig(stage="joint", lam=1e-4, steps=20, lr=3e-3, w=w, window=64), scenes, init)
        fractions.append(lossless_fraction(store, scenes))
    assert fractions[0] >= fractions[1] >= fractions[2]
    assert fractions[2] < fractions[0]


# ------------------------------------------------------------------ synth


def test_synth_is_deterministic_and_correlated():
    a = synth_cloud(SynthSceneSpec(n=500, seed=4))
    b = synth_cloud(SynthSceneSpec(n=500, seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a.fields().values(), b.fields().values()))
    near, far = neighbor_similarity(a)
    assert near > 0.5 and abs(far) < 0.2


def test_synth_validation():
    with pytest.raises(ValueError):
        SynthSceneSpec(n=0)
    with pytest.raises(ValueError):
        SynthSceneSpec(distribution="ring")
    with pytest.raises(ValueError):
        SynthSceneSpec(length_scale=0)
