"""End-to-end acceptance checks, one block per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists a
PASS/FAIL line per criterion.
"""

import json
import math
import time

import numpy as np
import pytest
import scipy.linalg

from sar2opt import layers as L
from sar2opt import tensor as T
from sar2opt.cli import main
from sar2opt.data import synth_dataset, to_batch
from sar2opt.layers import ConvSpec, LayerParams
from sar2opt.metrics import FeatureStats, compute_stats, evaluate_pairs, frechet_distance, psnr, sqrtm_spd
from sar2opt.networks import (
    DiscriminatorConfig,
    TranslatorConfig,
    build_discriminator,
    build_translator,
    discriminator_forward,
    random_input,
    translator_forward,
)
from sar2opt.tensor import Node, grad_check
from sar2opt.training import (
    ModelConfig,
    TrainConfig,
    build_model,
    checkpoint_bytes,
    discriminator_loss,
    discriminator_objective,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
    translate_batch,
    translate_images,
    translator_loss,
    translator_objective,
)

from smoothness import smooth_point

criterion = pytest.mark.criterion

DESK = ModelConfig(sar_channels=1, image_size=64, depth=4, ngf=8, ndf=8, n_stride2=3)


def readout(shape, seed=0):
    r = Node(np.random.default_rng(seed).normal(size=shape))
    return lambda y: T.sum_(y * r)


def signed_away_from_zero(seed, shape, margin=0.05):
    rng = np.random.default_rng(seed)
    return rng.uniform(margin, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# -- 1 ---------------------------------------------------------------------------------


def _gradient_cases():
    rng = np.random.default_rng(0)
    b = Node(rng.normal(size=(3, 2)))
    c = Node(rng.uniform(0.5, 1.5, size=(2, 3)))
    prims = {
        "add": (lambda x: T.sum_(T.add(x, c) * c), rng.uniform(-2, 2, (2, 3))),
        "sub": (lambda x: T.sum_(T.sub(c, x) * c), rng.uniform(-2, 2, (2, 3))),
        "mul": (lambda x: T.sum_(x * x * c), rng.uniform(-2, 2, (2, 3))),
        "matmul": (lambda x: T.sum_(T.matmul(x, b) * T.matmul(x, b)), rng.uniform(-2, 2, (2, 3))),
        "log": (lambda x: T.sum_(T.log(x) * c), rng.uniform(0.5, 2, (2, 3))),
        "abs": (lambda x: T.sum_(T.abs_(x) * c), signed_away_from_zero(1, (2, 3))),
        "mean": (lambda x: T.sum_(T.mean(x * x, axis=1)), rng.uniform(-2, 2, (2, 3))),
        "reshape": (lambda x: T.sum_(T.reshape(x, (3, 2)) * Node(np.arange(6.0).reshape(3, 2))), rng.uniform(-2, 2, (2, 3))),
        "clamp_min": (lambda x: T.sum_(T.clamp_min(x, 0.1) * c), signed_away_from_zero(2, (2, 3)) + 0.1),
    }
    for name, fn in [("leaky_relu", lambda n: L.leaky_relu(n, 0.2)), ("relu", L.relu), ("tanh", L.tanh), ("sigmoid", L.sigmoid)]:
        r = readout((2, 3), 1)
        prims[name] = (lambda x, fn=fn, r=r: r(fn(x)), signed_away_from_zero(3, (2, 3)))

    layers = {}
    spec = ConvSpec(2, 3, 4, 2, 1)
    p = L.init_params(spec, 0, "c")
    layers["conv2d"] = (lambda x: readout((1, 3, 4, 4))(L.conv2d(x, spec, p)), rng.uniform(-2, 2, (1, 2, 8, 8)))
    xc = Node(rng.uniform(-2, 2, (1, 2, 8, 8)))
    layers["conv2d.weight"] = (
        lambda w: readout((1, 3, 4, 4))(L.conv2d(xc, spec, LayerParams("c", w, p.bias))),
        p.weight.value.copy(),
    )
    tspec = ConvSpec(3, 2, 4, 2, 1)
    tp = L.init_params(tspec, 0, "t", transpose=True)
    layers["conv2d_transpose"] = (lambda x: readout((1, 2, 8, 8))(L.conv2d_transpose(x, tspec, tp)), rng.uniform(-2, 2, (1, 3, 4, 4)))
    xt = Node(rng.uniform(-2, 2, (1, 3, 4, 4)))
    layers["conv2d_transpose.weight"] = (
        lambda w: readout((1, 2, 8, 8))(L.conv2d_transpose(xt, tspec, LayerParams("t", w, tp.bias))),
        tp.weight.value.copy(),
    )
    npar = L.init_params(ConvSpec(2, 2, 1), 0, "n", bias=False, norm=True)
    npar.scale.value[:] = [1.5, 0.5]
    layers["instance_norm"] = (lambda x: readout((2, 2, 4, 4))(L.instance_norm(x, npar)), rng.uniform(-2, 2, (2, 2, 4, 4)))
    layers["avg_pool_downsample"] = (lambda x: readout((1, 2, 2, 2))(L.avg_pool_downsample(x, 4)), rng.uniform(-2, 2, (1, 2, 8, 8)))
    other = Node(rng.uniform(-2, 2, (1, 1, 4, 4)))
    layers["concat_channels"] = (lambda x: readout((1, 3, 4, 4))(L.concat_channels([x, other])), rng.uniform(-2, 2, (1, 2, 4, 4)))
    layers["pad2d"] = (lambda x: readout((1, 2, 7, 7))(L.pad2d(x, 1, 2, 1, 2)), rng.uniform(-2, 2, (1, 2, 4, 4)))
    return prims, layers


def _network_cases():
    tcfg = TranslatorConfig(1, 3, ngf=2, depth=2, input_size=8)
    tnet = build_translator(tcfg, 0)
    dcfg = DiscriminatorConfig(3, ndf=2, n_stride2=2, input_size=8)
    dnet = build_discriminator(dcfg, 0)
    real = Node(random_input(dcfg, 2, seed=100).value)
    tiny = ModelConfig(1, 8, 2, 2, 2, 2)
    model = build_model(tiny, 0)
    sar, opt = to_batch(synth_dataset(0, 2, 8))

    def hybrid(x):
        # L(T) as a function of the SAR input of the SAR->optical translator
        fakes = (translator_forward(model.t_s2o, x), translator_forward(model.t_o2s, Node(opt)))
        return translator_objective(model, (sar, opt), 20.0, fakes=fakes)[2]

    cases = {
        "translator": (lambda x: readout((1, 3, 8, 8))(translator_forward(tnet, x)), lambda s: random_input(tcfg, 1, s).value),
        "discriminator": (lambda x: readout((1, 1, 2, 2))(discriminator_forward(dnet, x)), lambda s: random_input(dcfg, 1, s).value),
        "discriminator_loss": (
            lambda x: discriminator_loss(discriminator_forward(dnet, real), discriminator_forward(dnet, x)),
            lambda s: random_input(dcfg, 2, s).value,
        ),
        "hybrid_translator_loss": (lambda x: hybrid(x), lambda s: np.random.default_rng(s).uniform(-1, 1, size=sar.shape)),
    }
    return cases


@criterion(1, "gradient suite: primitives < 1e-3, layers and networks < 1e-2, under 2 min")
def test_c1_gradient_suite(record_property):
    start = time.perf_counter()
    prims, layers = _gradient_cases()
    prim_err = {k: grad_check(f, x) for k, (f, x) in prims.items()}
    for k, (f, x) in layers.items():
        assert not T.kink_crossings(f, x), k
    layer_err = {k: grad_check(f, x) for k, (f, x) in layers.items()}
    net_err = {}
    for k, (f, make) in _network_cases().items():
        net_err[k] = grad_check(f, smooth_point(f, make))
    elapsed = time.perf_counter() - start
    record_property("max_primitive", f"{max(prim_err.values()):.1e}")
    record_property("max_layer", f"{max(layer_err.values()):.1e}")
    record_property("max_network", f"{max(net_err.values()):.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert all(e < 1e-3 for e in prim_err.values()), prim_err
    assert all(e < 1e-2 for e in layer_err.values()), layer_err
    assert all(e < 1e-2 for e in net_err.values()), net_err
    assert elapsed < 120


# -- 2 -----------------------------------------------------------------------------------


def _closed_form(m1, c1, m2, c2):
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * np.trace(scipy.linalg.sqrtm(c1 @ c2)).real)


@criterion(2, "Frechet analytics and seeded-Gaussian oracle")
def test_c2_frechet(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    s = compute_stats(rng.normal(size=(500, 16)))
    assert frechet_distance(s, s) < 1e-6
    e1 = np.zeros(8)
    e1[0] = 1
    eye = FeatureStats(np.zeros(8), np.eye(8), 100)
    assert abs(frechet_distance(eye, FeatureStats(e1, np.eye(8), 100)) - 1.0) <= 1e-6
    assert abs(frechet_distance(FeatureStats(np.zeros(8), 4 * np.eye(8), 100), eye) - 8.0) <= 1e-6

    d = 16
    a, b = rng.normal(size=(d, d)) / 4, rng.normal(size=(d, d)) / 4
    c1, c2 = a @ a.T + np.eye(d), b @ b.T + 0.5 * np.eye(d)
    m1, m2 = np.zeros(d), rng.normal(0, 0.5, d)
    ref = _closed_form(m1, c1, m2, c2)
    emp = frechet_distance(
        compute_stats(rng.multivariate_normal(m1, c1, 20_000)), compute_stats(rng.multivariate_normal(m2, c2, 20_000))
    )
    record_property("relative_gap", f"{abs(emp / ref - 1):.2%}")
    assert abs(emp / ref - 1) < 0.05
    assert time.perf_counter() - start < 10


# -- 3 -------------------------------------------------------------------------------------


@criterion(3, "matrix square root reconstruction on 100 SPD matrices")
def test_c3_sqrtm():
    rng = np.random.default_rng(3)
    worst = 0.0
    for d in np.linspace(2, 128, 100).astype(int):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        lam = 10 ** rng.uniform(-3, 3, size=d)
        m = (q * lam) @ q.T
        m = (m + m.T) / 2
        r = sqrtm_spd(m)
        worst = max(worst, np.linalg.norm(r @ r - m) / np.linalg.norm(m))
    assert worst < 1e-6


# -- 4 -------------------------------------------------------------------------------------


@criterion(4, "loss algebra: 2 ln 2, L(T) = L_GAN + 20 L_L1 per step, beta 0")
def test_c4_loss_algebra():
    half = Node(np.full((2, 1, 8, 8), 0.5))
    assert abs(discriminator_loss(half, half).item() - 2 * math.log(2)) <= 1e-6

    pairs = synth_dataset(4, 8, 32)
    model = build_model(ModelConfig(1, 32, 3, 4, 4, 2), 0)
    cfg = TrainConfig(batch_size=2, seed=4)
    assert cfg.beta == 20
    for r in run_training(model, pairs, cfg, steps=20):
        assert abs(r.loss_t - (r.loss_gan + 20 * r.loss_l1)) <= 1e-6

    batch = to_batch(pairs[:2])
    gan, l1, total = translator_objective(model, batch, 0.0)
    assert translator_loss(gan, l1, 0.0).item() == gan.item() == total.item()
    zero = TrainConfig(batch_size=2, beta=0.0)
    r = train_step(model, batch, zero)
    assert r.loss_t == r.loss_gan


# -- 5 -------------------------------------------------------------------------------------


def _objectives(model, batch, beta):
    with T.precision(np.float64):
        fo, fs = translate_batch(model, batch)
        return {
            "d_opt": discriminator_objective(model, "opt", batch, fo).item(),
            "d_sar": discriminator_objective(model, "sar", batch, fs).item(),
            "translators": translator_objective(model, batch, beta, (fo, fs))[2].item(),
        }


@criterion(5, "min-max descent with sgd lr 1e-4 over 50 steps")
def test_c5_descent(record_property):
    model = build_model(DESK, 0)
    batch = to_batch(synth_dataset(5, 2, 64))
    cfg = TrainConfig(optimizer_kind="sgd", learning_rate=1e-4, batch_size=2)
    current = _objectives(model, batch, cfg.beta)
    worst = {"d_opt": -math.inf, "d_sar": -math.inf, "translators": -math.inf}

    def check(stage, m, b):
        nonlocal current
        after = _objectives(m, b, cfg.beta)
        worst[stage] = max(worst[stage], after[stage] - current[stage])
        current = after

    for _ in range(50):
        train_step(model, batch, cfg, callback=check)
    for k, v in worst.items():
        record_property(f"max_increase_{k}", f"{v:.1e}")
    assert all(v <= 1e-6 for v in worst.values()), worst


# -- 6 and 7 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_training(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    args = ["train", "--preset", "desk", "--synth", "--n-synth", "256", "--steps", "2000", "--batch-size", "4"]
    start = time.perf_counter()
    code = main(args + ["--out", str(out), "--checkpoint-every", "500"])
    elapsed = time.perf_counter() - start
    assert code == 0
    ck = load_checkpoint(out / "checkpoint.sogr")
    untrained = build_model(ck.model.config, ck.train_config.seed)
    val = synth_dataset(10_001, 64, 64)

    def scores(model):
        fake_opt = translate_images(model.t_s2o, [p.sar for p in val])
        fake_sar = translate_images(model.t_o2s, [p.optical for p in val])
        s2o = evaluate_pairs(list(zip(fake_opt, [p.optical for p in val])))
        o2s = evaluate_pairs(list(zip(fake_sar, [p.sar for p in val])))
        return s2o, o2s

    return {"seconds": elapsed, "before": scores(untrained), "after": scores(ck.model), "out": out}


@criterion(6, "desk training: SAR->optical L1 improves >= 50%, SSIM rises, <= 15 min")
def test_c6_desk_convergence(desk_training, record_property):
    before, after = desk_training["before"][0], desk_training["after"][0]
    gain = 1 - after.l1 / before.l1
    record_property("l1", f"{before.l1:.1f}->{after.l1:.1f} ({gain:.0%})")
    record_property("ssim", f"{before.ssim:.3f}->{after.ssim:.3f}")
    record_property("minutes", f"{desk_training['seconds'] / 60:.1f}")
    assert gain >= 0.5
    assert after.ssim > before.ssim
    assert desk_training["seconds"] <= 15 * 60
    assert (desk_training["out"] / "losses.png").exists()


@criterion(7, "reciprocity: optical->SAR L1 improves >= 30% in the same run")
def test_c7_reciprocity(desk_training, record_property):
    before, after = desk_training["before"][1], desk_training["after"][1]
    gain = 1 - after.l1 / before.l1
    record_property("l1", f"{before.l1:.1f}->{after.l1:.1f} ({gain:.0%})")
    assert gain >= 0.3


# -- 8 ----------------------------------------------------------------------------------------


@criterion(8, "determinism, bit-exact resume, byte-identical checkpoint round trip")
def test_c8_determinism(tmp_path):
    pairs = synth_dataset(8, 16, 64)
    cfg = TrainConfig(batch_size=2, seed=8)

    def run(steps):
        m = build_model(DESK, 8)
        run_training(m, pairs, cfg, steps=steps)
        return m

    a, b = run(6), run(6)
    assert checkpoint_bytes(a, cfg) == checkpoint_bytes(b, cfg)

    mid = run(3)
    save_checkpoint(mid, cfg, tmp_path / "mid.sogr")
    ck = load_checkpoint(tmp_path / "mid.sogr")
    run_training(ck.model, pairs, ck.train_config, steps=6)
    assert checkpoint_bytes(ck.model, cfg) == checkpoint_bytes(a, cfg)

    save_checkpoint(a, cfg, tmp_path / "a.sogr")
    again = load_checkpoint(tmp_path / "a.sogr")
    save_checkpoint(again.model, again.train_config, tmp_path / "b.sogr")
    assert (tmp_path / "a.sogr").read_bytes() == (tmp_path / "b.sogr").read_bytes()


# -- 9 ----------------------------------------------------------------------------------------


@criterion(9, "metric self-consistency and the |diff| = 1 PSNR")
def test_c9_metric_self_consistency(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "6", "--size", "64"]) == 0
    capsys.readouterr()
    b = str(tmp_path / "d" / "B")
    assert main(["evaluate", "--pred", b, "--true", b, "--out", str(tmp_path / "r")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["l1"] == 0 and rep["ssim"] == 1 and rep["psnr_db"] == "inf" and rep["fid"] < 1e-6

    img = np.random.default_rng(9).integers(1, 255, size=(64, 64, 3)).astype(np.uint8)
    assert abs(psnr(img, img + 1) - 48.1308) <= 1e-3


# -- 10 ----------------------------------------------------------------------------------------


@criterion(10, "shape contracts at 256 and desk scale")
def test_c10_shapes():
    t = TranslatorConfig(1, 3, ngf=50, depth=6, input_size=256)
    assert translator_forward(build_translator(t, 0), random_input(t)).shape == (1, 3, 256, 256)
    d = DiscriminatorConfig(3, ndf=64, n_stride2=3, input_size=256)
    assert discriminator_forward(build_discriminator(d, 0), random_input(d)).shape == (1, 1, 32, 32)

    model = build_model(DESK, 0)
    x = Node(np.zeros((1, 1, 64, 64)))
    assert translator_forward(model.t_s2o, x).shape == (1, 3, 64, 64)
    fake = translator_forward(model.t_o2s, Node(np.zeros((1, 3, 64, 64))))
    assert fake.shape == (1, 1, 64, 64)
    assert discriminator_forward(model.d_opt, Node(np.zeros((1, 3, 64, 64)))).shape == (1, 1, 8, 8)
    assert discriminator_forward(model.d_sar, fake).shape == (1, 1, 8, 8)
