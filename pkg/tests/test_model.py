import math

import numpy as np
import pytest
from oracles import finite_difference_gradcheck

from elastipatch.data import DatasetSpec, synth_shapes
from elastipatch.errors import ParseError
from elastipatch.extract import image_from_array
from elastipatch.geometry import ImageSpec
from elastipatch.model import (
    AdamHyper,
    AdamState,
    ModelConfig,
    ModelParams,
    TrainConfig,
    backward,
    cosine_lr,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    loss_softmax_ce,
    optimizer_step,
    params_from_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=2, mlp_ratio=2.0, classes=3)


def random_inputs(cfg, B=2, n=5, seed=1):
    rng = np.random.default_rng(seed)
    pixels = rng.random((B, n, cfg.r, cfg.r, cfg.channels))
    encs = rng.normal(size=(B, n, cfg.dim))
    return pixels, encs


def test_zero_network_outputs_head_bias():
    cfg = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=1, mlp_ratio=2.0, classes=3)
    params = init_params(cfg, np.random.default_rng(0))
    for name in params.names():
        params.tensors[name] = np.zeros_like(params[name])
    params.tensors["head.b"] = np.array([0.3, -0.7, 1.1])
    pixels, encs = random_inputs(cfg, B=2, n=1)
    logits, _ = forward(params, pixels, encs)
    assert np.allclose(logits, [[0.3, -0.7, 1.1]] * 2, atol=1e-15)


def test_token_permutation_invariance():
    params = init_params(SMALL, np.random.default_rng(3))
    pixels, encs = random_inputs(SMALL, B=1, n=7)
    base, _ = forward(params, pixels, encs)
    perm = np.random.default_rng(4).permutation(7)
    permuted, _ = forward(params, pixels[:, perm], encs[:, perm])
    assert np.allclose(base, permuted, atol=1e-10)


def test_logits_finite_for_many_random_inputs():
    params = init_params(SMALL, np.random.default_rng(5))
    pixels, encs = random_inputs(SMALL, B=1000, n=9, seed=6)
    logits, _ = forward(params, pixels, encs)
    assert logits.shape == (1000, 3)
    assert np.all(np.isfinite(logits))


def test_variable_token_count():
    params = init_params(SMALL, np.random.default_rng(7))
    for n in (1, 2, 5, 64):
        pixels, encs = random_inputs(SMALL, B=2, n=n)
        logits, cache = forward(params, pixels, encs)
        assert logits.shape == (2, 3)
        grads = backward(params, cache, np.ones_like(logits))
        assert set(grads) == set(params.names())


def test_input_contract_violations():
    params = init_params(SMALL, np.random.default_rng(0))
    pixels, encs = random_inputs(SMALL)
    with pytest.raises(ValueError):
        forward(params, pixels[:, :, :, :2], encs)
    with pytest.raises(ValueError):
        forward(params, pixels, encs[:, :, :16])
    with pytest.raises(ValueError):
        forward(params, pixels[:, :0], encs[:, :0])


def test_gradcheck_every_tensor():
    """Acceptance-grade check: all parameters, all elements, rel err <= 1e-4."""
    params = init_params(SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    pixels = rng.random((2, 5, 16))
    encs = rng.normal(size=(2, 5, 32))
    labels = np.eye(3)[[0, 2]]
    worst = finite_difference_gradcheck(params, pixels, encs, labels)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, f"gradient mismatches: {bad}"


def test_zero_dlogits_gives_zero_grads():
    params = init_params(SMALL, np.random.default_rng(2))
    pixels, encs = random_inputs(SMALL)
    logits, cache = forward(params, pixels, encs)
    grads = backward(params, cache, np.zeros_like(logits))
    for g in grads.values():
        assert np.all(g == 0.0)


def test_dropout_only_in_train_mode():
    cfg = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=2, mlp_ratio=2.0, classes=3, dropout=0.5)
    params = init_params(cfg, np.random.default_rng(0))
    pixels, encs = random_inputs(cfg)
    a, _ = forward(params, pixels, encs, train_mode=False)
    b, _ = forward(params, pixels, encs, train_mode=False)
    assert np.array_equal(a, b)
    c, _ = forward(params, pixels, encs, train_mode=True, rng=np.random.default_rng(1))
    d, _ = forward(params, pixels, encs, train_mode=True, rng=np.random.default_rng(2))
    assert not np.array_equal(c, d)
    with pytest.raises(ValueError):
        forward(params, pixels, encs, train_mode=True)


def test_loss_uniform_logits_one_hot():
    logits = np.zeros((1, 5))
    loss, _ = loss_softmax_ce(logits, np.eye(5)[[2]])
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_loss_gradient_zero_at_matching_softmax():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 4))
    z = logits - logits.max()
    soft = np.exp(z) / np.exp(z).sum()
    _, d = loss_softmax_ce(logits, soft)
    assert np.max(np.abs(d)) < 1e-12


def test_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 4))
    labels = np.array([[0.2, 0.3, 0.4, 0.1], [0.0, 0.0, 1.0, 0.0]])
    _, d = loss_softmax_ce(logits, labels)
    eps = 1e-6
    for i in range(2):
        for j in range(4):
            lp = logits.copy()
            lp[i, j] += eps
            lm = logits.copy()
            lm[i, j] -= eps
            fd = (loss_softmax_ce(lp, labels)[0] - loss_softmax_ce(lm, labels)[0]) / (2 * eps)
            assert abs(fd - d[i, j]) < 1e-6


def test_loss_accepts_soft_label_and_vector():
    from elastipatch.augment import SoftLabel

    logits = np.array([0.5, -0.5, 0.0])
    a, da = loss_softmax_ce(logits, SoftLabel.one_hot(1, 3))
    b, db = loss_softmax_ce(logits[None], np.eye(3)[[1]])
    assert a == b
    assert np.array_equal(da, db[0])


def test_adam_zero_grads_zero_decay_is_noop():
    params = init_params(SMALL, np.random.default_rng(0))
    before = {k: v.copy() for k, v in params.tensors.items()}
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    optimizer_step(params, grads, AdamState(), AdamHyper(lr=0.1, weight_decay=0.0))
    for k in before:
        assert np.array_equal(params[k], before[k])


def test_adam_matches_hand_computed_moments():
    cfg = SMALL
    params = init_params(cfg, np.random.default_rng(0))
    name = "head.w"
    params.tensors[name] = np.array([[1.0]])
    # restrict the update to a single scalar tensor
    single = ModelParams(cfg, {name: params.tensors[name]})
    state = AdamState()
    hyper = AdamHyper(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)

    # hand calculation, step 1 with g=1:
    # m=0.1, v=0.001, mhat=1.0, vhat=1.0, p = 1 - 0.1*1/(1+1e-8)
    optimizer_step(single, {name: np.array([[1.0]])}, state, hyper)
    expect1 = 1.0 - 0.1 * (0.1 / (1 - 0.9)) / (math.sqrt(0.001 / (1 - 0.999)) + 1e-8)
    assert single[name][0, 0] == pytest.approx(expect1, abs=1e-15)

    # step 2 with g=-0.5
    m2 = 0.9 * 0.1 + 0.1 * (-0.5)
    v2 = 0.999 * 0.001 + 0.001 * 0.25
    mhat = m2 / (1 - 0.9**2)
    vhat = v2 / (1 - 0.999**2)
    expect2 = expect1 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
    optimizer_step(single, {name: np.array([[-0.5]])}, state, hyper)
    assert single[name][0, 0] == pytest.approx(expect2, abs=1e-15)


def test_adam_decay_only_shrinks_weights():
    cfg = SMALL
    params = init_params(cfg, np.random.default_rng(1))
    w_before = params["head.w"].copy()
    b_before = params["head.b"].copy()
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    optimizer_step(params, grads, AdamState(), AdamHyper(lr=0.1, weight_decay=0.5))
    assert np.allclose(params["head.w"], w_before * (1 - 0.1 * 0.5), atol=1e-15)
    assert np.array_equal(params["head.b"], b_before)  # biases are not decayed


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1.0, warmup_steps=10) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)
    assert cosine_lr(10, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)
    assert cosine_lr(100, 100, 1.0, warmup_steps=10) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(55, 100, 2.0) < 2.0


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(SMALL, np.random.default_rng(9))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, extra={"meta.epoch": np.array(3.0)})
    cfg, tensors = load_checkpoint(path)
    assert cfg == SMALL
    for name in params.names():
        assert np.array_equal(tensors[name], params[name])
        assert tensors[name].tobytes() == params[name].tobytes()
    assert float(tensors["meta.epoch"]) == 3.0
    loaded = params_from_checkpoint(path)
    assert loaded.config == SMALL


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(ParseError) as err:
        load_checkpoint(path)
    assert err.value.offset == 0

    params = init_params(SMALL, np.random.default_rng(0))
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, params)
    data = good.read_bytes()
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(data[: len(data) // 2])
    with pytest.raises(ParseError):
        load_checkpoint(trunc)


def test_checkpoint_missing_tensor_rejected(tmp_path):
    params = init_params(SMALL, np.random.default_rng(0))
    partial = ModelParams(SMALL, {"embed.w": params["embed.w"]})
    path = tmp_path / "partial.ckpt"
    save_checkpoint(path, partial)
    with pytest.raises(ParseError):
        params_from_checkpoint(path)


# ---------------------------------------------------------------------------
# train / evaluate


class ConstantDataset:
    """All images identical, all labels equal: a perfect constant-class task."""

    def __init__(self, n=20, side=16, label=1, classes=3):
        self.native_spec = ImageSpec(side, side, 1)
        self.oversampled_spec = ImageSpec(side * 2, side * 2, 1)
        self.oversample = 2
        self.classes = classes
        self._label = label
        self._n = n
        self._img = image_from_array(np.full((side, side), 0.5))

    def __len__(self):
        return self._n

    def label(self, i):
        return self._label

    def native(self, i):
        return self._img

    def oversampled(self, i):
        return image_from_array(np.full((32, 32), 0.5))


def test_evaluate_constant_model_on_constant_dataset():
    cfg = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=1, mlp_ratio=2.0, classes=3)
    params = init_params(cfg, np.random.default_rng(0))
    for name in params.names():
        params.tensors[name] = np.zeros_like(params[name])
    params.tensors["head.b"] = np.array([0.0, 5.0, 0.0])
    ds = ConstantDataset(label=1)
    assert evaluate(params, ds) == 1.0
    assert evaluate(params, ds, perturb=None) == evaluate(params, ds)


def test_evaluate_identity_pipeline_equals_plain():
    from elastipatch.perturb import PerturbConfig

    cfg = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=1, mlp_ratio=2.0, classes=3)
    params = init_params(cfg, np.random.default_rng(1))
    ds = ConstantDataset(label=2)
    ident = PerturbConfig(s1=1.0, s2=1.0, q=0.0, d=0)
    assert evaluate(params, ds, perturb=ident, seed_entropy=(4,)) == evaluate(params, ds)


TINY_DATA = DatasetSpec(classes=3, size=60, side=16, seed=3)
TINY_MODEL = ModelConfig(r=4, channels=1, dim=32, heads=2, depth=1, mlp_ratio=2.0, classes=3)


def test_train_deterministic_same_seed():
    ds = synth_shapes(TINY_DATA)
    regime = TrainConfig(epochs=2, batch_size=16, elastic_fraction=0.5, seed=11, precision="f64")
    p1, h1, _ = train(TINY_MODEL, ds, regime)
    p2, h2, _ = train(TINY_MODEL, ds, regime)
    assert h1 == h2
    for name in p1.names():
        assert p1[name].tobytes() == p2[name].tobytes()


def test_train_elastic_fraction_zero_never_touches_oversampled():
    ds = synth_shapes(TINY_DATA)
    calls = {"n": 0}
    orig = ds.oversampled

    def spy(i):
        calls["n"] += 1
        return orig(i)

    ds.oversampled = spy
    regime = TrainConfig(epochs=1, batch_size=16, elastic_fraction=0.0, seed=0)
    train(TINY_MODEL, ds, regime)
    assert calls["n"] == 0
    regime = TrainConfig(epochs=1, batch_size=16, elastic_fraction=1.0, seed=0)
    train(TINY_MODEL, ds, regime)
    assert calls["n"] > 0


@pytest.mark.slow
def test_memorization_overfit_oracle():
    """A desk-config model drives training loss below 0.05 on 64 samples."""
    ds = synth_shapes(DatasetSpec(classes=4, size=72, side=64, seed=5))
    cfg = ModelConfig(r=8, channels=1, dim=64, heads=4, depth=4, mlp_ratio=2.0, classes=4)
    regime = TrainConfig(
        epochs=60, batch_size=16, lr=3e-4, weight_decay=0.0, elastic_fraction=0.0,
        val_fraction=1.0 / 9.0, seed=0,
    )
    _, history, _ = train(cfg, ds, regime)
    assert min(h[1] for h in history) < 0.05
