import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qsmforge.nn import (Adam, CriticSpec, GeneratorSpec, Module, Tape, Tensor, build_critic, build_generator, conv3d,
                         no_grad)
from qsmforge.nn.tensor import reshape
from qsmforge.patching import PatchGeometry
from qsmforge.phantom import synth_dataset, tissue_spec
from qsmforge.training import (GanConfig, GpMode, PatchLoader, TrainingDivergedError, _l1_step, clone_generator,
                               critic_loss, generator_loss, gradient_penalty, history_csv, l1_content_loss,
                               named_rng, train_baseline, train_gan, validation_l1)

GEOM = PatchGeometry(16, 8)
GEN = GeneratorSpec(16, 8, depth=2, base_channels=2)
CRITIC = CriticSpec(8, blocks=2, base_channels=2)


@pytest.fixture(scope="module")
def subjects():
    spec = tissue_spec((24, 24, 24), np.random.default_rng(5), seed=5)
    return synth_dataset(3, spec)


def small_cfg(**kw):
    base = dict(batch_size=2, iters_baseline=4, iters_critic_pretrain=2, iters_joint=3, n_critic=2,
                lr_baseline=1e-3, lr_joint=1e-3, val_every=2, seed=7, dtype="float64")
    base.update(kw)
    return GanConfig(**base)


def states_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class LinearCritic(Module):
    """``f(x) = <w, x>`` per sample, via a valid convolution covering the whole patch."""

    def __init__(self, w):
        super().__init__()
        self.w = self.param("w", np.asarray(w, dtype=np.float64)[None, None])

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = conv3d(x, self.w)
        return reshape(y, (y.shape[0], 1))


# -- losses -------------------------------------------------------------------------------------
def test_l1_content_loss_examples(rng):
    t = rng.normal(size=(2, 1, 4, 4, 4))
    assert l1_content_loss(Tensor(t), t).item() == 0.0
    assert l1_content_loss(Tensor(t + 0.5), t).item() == pytest.approx(0.5, abs=1e-12)
    p = rng.normal(size=t.shape)
    total = 0.0
    for v, w in zip(p.ravel(), t.ravel()):
        total += abs(v - w)
    assert l1_content_loss(Tensor(p), t).item() == pytest.approx(total / p.size, abs=1e-12)
    with pytest.raises(ValueError):
        l1_content_loss(Tensor(p), t[:1])


def test_critic_loss_examples(rng):
    s = Tensor(rng.normal(size=(3, 1)))
    assert critic_loss(s, s).item() == 0.0
    assert critic_loss(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1)))).item() == -1.0
    r, f = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    assert critic_loss(Tensor(r), Tensor(f)).item() == pytest.approx(sum(f.ravel()) / 4 - sum(r.ravel()) / 4)


@given(st.floats(-100, 100), st.integers(0, 1000))
def test_critic_loss_translation_invariant(c, seed):
    g = np.random.default_rng(seed)
    r, f = g.normal(size=(5, 1)), g.normal(size=(5, 1))
    a = critic_loss(Tensor(r), Tensor(f)).item()
    b = critic_loss(Tensor(r + c), Tensor(f + c)).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_generator_loss_examples(rng):
    cfg = GanConfig()
    p, t = rng.normal(size=(2, 1, 4, 4, 4)), rng.normal(size=(2, 1, 4, 4, 4))
    d = Tensor(rng.normal(size=(2, 1)))
    total, content, _ = generator_loss(Tensor(p), t, d, cfg.replace(lambda_adv=0.0))
    assert total.item() == content.item()
    total, _, _ = generator_loss(Tensor(t), t, Tensor(np.array([[1.0], [-1.0]])), cfg)
    assert total.item() == 0.0
    # L1 = 0.2 and mean score 3 give 0.2 - 0.03
    total, content, adv = generator_loss(Tensor(t + 0.2), t, Tensor(np.full((2, 1), 3.0)), cfg)
    assert total.item() == pytest.approx(0.17, abs=1e-12)
    assert adv.item() == -3.0


# -- gradient penalty --------------------------------------------------------------------------
def _signs(seed):
    return np.where(np.random.default_rng(seed).random((4, 4, 4)) < 0.5, -1.0, 1.0)


@pytest.mark.parametrize("mode", list(GpMode))
def test_gradient_penalty_linear_critics_exact(rng, mode):
    # 64 weights of magnitude 1/8 have unit norm; 1/4 doubles it
    fake, real = rng.normal(size=(3, 1, 4, 4, 4)), rng.normal(size=(3, 1, 4, 4, 4))
    cfg = GanConfig(gp_mode=mode)
    for mag, expected in ((1 / 8, 0.0), (1 / 4, cfg.lambda_gp)):
        critic = LinearCritic(_signs(1) * mag)
        with Tape():
            gp = gradient_penalty(critic, fake, cfg, real, np.random.default_rng(0))
        assert gp.item() == expected


@given(st.integers(0, 10_000))
def test_gradient_penalty_batch_permutation_invariant(seed):
    g = np.random.default_rng(seed)
    critic = build_critic_small(seed)
    x = g.normal(size=(4, 1, 8, 8, 8))
    perm = g.permutation(4)
    cfg = GanConfig()
    with Tape():
        a = gradient_penalty(critic, x, cfg).item()
    with Tape():
        b = gradient_penalty(critic, x[perm], cfg).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def build_critic_small(seed):
    return build_critic(CRITIC, np.random.default_rng(seed))


def test_gradient_penalty_requires_tape_and_path(rng):
    critic = build_critic_small(0)
    with pytest.raises(RuntimeError):
        gradient_penalty(critic, rng.normal(size=(2, 1, 8, 8, 8)), GanConfig())

    class Constant(Module):
        def forward(self, x):
            return Tensor(np.ones((x.shape[0], 1)))

    with Tape(), pytest.raises(ValueError):
        gradient_penalty(Constant(), rng.normal(size=(2, 1, 8, 8, 8)), GanConfig())


def test_gradient_penalty_interpolates_needs_real():
    with Tape(), pytest.raises(ValueError):
        gradient_penalty(build_critic_small(0), np.zeros((1, 1, 8, 8, 8)),
                         GanConfig(gp_mode=GpMode.AT_INTERPOLATES))


# -- config -----------------------------------------------------------------------------------------
def test_gan_config_defaults_and_validation():
    cfg = GanConfig()
    assert (cfg.lambda_gp, cfg.lambda_c, cfg.lambda_adv, cfg.n_critic) == (100.0, 1.0, 0.01, 5)
    assert (cfg.lr_joint, cfg.lr_baseline, cfg.betas, cfg.batch_size) == (1e-5, 1e-4, (0.5, 0.999), 16)
    assert (cfg.iters_baseline, cfg.iters_critic_pretrain, cfg.iters_joint) == (40000, 20000, 40000)
    assert cfg.gp_mode is GpMode.AT_GENERATED
    assert GanConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GanConfig(n_critic=0)
    with pytest.raises(ValueError):
        GanConfig(lr_joint=0.0)
    with pytest.raises(ValueError):
        GanConfig.from_dict({"learning_rate": 1.0})


def test_named_streams_are_distinct_and_reproducible():
    a = named_rng(3, "generator").random(4)
    assert np.array_equal(a, named_rng(3, "generator").random(4))
    assert not np.array_equal(a, named_rng(3, "critic").random(4))
    assert not np.array_equal(a, named_rng(4, "generator").random(4))


# -- data ------------------------------------------------------------------------------------------
def test_patch_loader_shapes_and_ranges(subjects):
    loader = PatchLoader(subjects, GEOM, np.random.default_rng(0))
    x, y = loader.batch(3)
    assert x.shape == (3, 1, 16, 16, 16) and y.shape == (3, 1, 8, 8, 8)
    assert x.dtype == np.float32
    assert np.all(np.abs(y) < 1)
    with pytest.raises(ValueError):
        PatchLoader([], GEOM, np.random.default_rng(0))
    with pytest.raises(ValueError):
        PatchLoader(subjects, PatchGeometry(32, 32), np.random.default_rng(0))


# -- training runs ---------------------------------------------------------------------------------------
def test_zero_iteration_run_returns_initial_model(subjects):
    cfg = small_cfg(iters_baseline=0)
    init = build_generator(GEN, named_rng(cfg.seed, "init-generator"))
    res = train_baseline(subjects, [], GEOM, GEN, cfg)
    assert states_equal(res.model.state_dict(), init.state_dict())
    assert states_equal(res.best_state, init.state_dict())
    assert res.best_iteration == 0


def test_baseline_is_deterministic_and_records_history(subjects):
    cfg = small_cfg()
    a = train_baseline(subjects[:2], subjects[2:], GEOM, GEN, cfg)
    b = train_baseline(subjects[:2], subjects[2:], GEOM, GEN, cfg)
    assert states_equal(a.model.state_dict(), b.model.state_dict())
    assert a.history == b.history
    vals = [h["iteration"] for h in a.history if h.get("val_l1") is not None]
    assert vals == [0, 2, 4]
    assert a.best_val_l1 == min(h["val_l1"] for h in a.history if h.get("val_l1") is not None)
    best = a.best_model()
    assert validation_l1(best, subjects[2:], GEOM) == pytest.approx(a.best_val_l1, rel=1e-12)
    csv = history_csv(a.history)
    assert csv.splitlines()[0].startswith("phase,iteration,l1_train,val_l1")


def test_baseline_without_validation_keeps_final_state(subjects):
    res = train_baseline(subjects, [], GEOM, GEN, small_cfg())
    assert res.best_iteration == 4 and math.isnan(res.best_val_l1)
    assert states_equal(res.best_state, res.model.state_dict())


def test_init_model_is_not_modified(subjects):
    init = build_generator(GEN, np.random.default_rng(1))
    before = init.state_dict()
    train_baseline(subjects, [], GEOM, GEN, small_cfg(), init=init)
    assert states_equal(before, init.state_dict())


def test_phase_a_leaves_generator_unchanged(subjects):
    cfg = small_cfg(iters_critic_pretrain=3, iters_joint=0)
    init = build_generator(GEN, np.random.default_rng(2))
    res = train_gan(subjects, [], GEOM, GEN, CRITIC, cfg, init=init)
    assert states_equal(res.model.state_dict(), init.state_dict())
    pre = [h for h in res.history if h["phase"] == "critic-pretrain"]
    assert pre[-1]["iteration"] == 3 and np.isfinite(pre[-1]["gp"])


@pytest.mark.parametrize("mode", list(GpMode))
def test_zero_adversarial_weight_replays_baseline_bitwise(subjects, mode):
    cfg = small_cfg(lambda_adv=0.0, iters_joint=4, gp_mode=mode)
    init = build_generator(GEN, np.random.default_rng(3))
    seen_gan, seen_base = [], []
    gan = train_gan(subjects, [], GEOM, GEN, CRITIC, cfg, init=init,
                    callback=lambda it, g: seen_gan.append(g.state_dict()))
    base = train_baseline(subjects, [], GEOM, GEN, cfg, init=init, lr=cfg.lr_joint, iters=cfg.iters_joint,
                          callback=lambda it, g: seen_base.append(g.state_dict()))
    assert len(seen_gan) == len(seen_base) == 4
    for a, b in zip(seen_gan, seen_base):
        assert states_equal(a, b)
    assert states_equal(gan.model.state_dict(), base.model.state_dict())


def test_gan_history_fields(subjects):
    res = train_gan(subjects[:2], subjects[2:], GEOM, GEN, CRITIC, small_cfg(), init=None)
    joint = [h for h in res.history if h["phase"] == "joint" and h["iteration"] > 0]
    assert joint and all(k in joint[-1] for k in ("critic_loss", "gp", "g_content", "g_adv"))
    assert res.critic is not None
    with pytest.raises(ValueError):
        train_gan(subjects, [], GEOM, GEN, CriticSpec(16, blocks=2), small_cfg())


def test_nan_loss_aborts_with_diagnostic(subjects):
    init = build_generator(GEN, np.random.default_rng(4))
    init.head.weight.data[...] = np.nan
    with pytest.raises(TrainingDivergedError, match="baseline.*iteration 1"):
        train_baseline(subjects, [], GEOM, GEN, small_cfg(), init=init)


class _Fixed:
    def __init__(self, x, y):
        self.x, self.y = x, y

    def batch(self, n):
        return self.x, self.y


def test_overfit_fixed_patches(subjects):
    spec = GeneratorSpec(8, 8, depth=1, base_channels=8)
    loader = PatchLoader(subjects, PatchGeometry(8, 8, depth=1), np.random.default_rng(11), dtype=np.float64)
    fixed = _Fixed(*loader.batch(10))
    gen = build_generator(spec, np.random.default_rng(11))
    opt = Adam(gen.parameters(), 1e-3)
    losses = [_l1_step(gen, opt, fixed, 10) for _ in range(2000)]
    with no_grad():
        final = l1_content_loss(gen(fixed.x), fixed.y).item()
    assert min(losses[-20:]) < 0.1 * losses[0]
    assert final < 0.1 * losses[0]


def test_clone_is_independent():
    g = build_generator(GEN, np.random.default_rng(0))
    c = clone_generator(g)
    c.head.weight.data[...] += 1.0
    assert not np.array_equal(c.head.weight.data, g.head.weight.data)
