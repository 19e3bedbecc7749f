import itertools

import numpy as np
import pytest
from scipy import stats

from conftest import tiny_dataset
from rehashdiff.dataset import ToyDataset, generate_grid_patterns
from rehashdiff.denoiser import ExactPosteriorDenoiser, LinearSoftmaxDenoiser, softmax
from rehashdiff.evaluation import empirical_distribution, tv_distance
from rehashdiff.samplers import (CfgConfig, GumbelConfig, Guide, chunk_rng, cfg_combine,
                                 default_dfm_steps, dfm_step, generate, initial_state, mvtm_step,
                                 rehash_step, sample_dfm, sample_hybrid, sample_inpaint,
                                 sample_mvtm, sample_rehash, swept_gumbel_configs)
from rehashdiff.schedule import LINEAR
from rehashdiff.vocab import ContractError, VocabSpec


class UniformDenoiser:
    """Uniform predictions over d valid tokens for any input."""

    def __init__(self, spec, L):
        self.spec, self.length, self.n_classes = spec, L, 0

    def check_label(self, label):
        pass

    def predict(self, x, t, label=None):
        x = np.atleast_2d(x)
        return np.full(x.shape + (self.spec.d,), 1.0 / self.spec.d)

    def predict_logits(self, x, t, label=None):
        return np.log(self.predict(x, t, label))


def _exact(data=None):
    return ExactPosteriorDenoiser(data or tiny_dataset(), strict=False)


def _random_linear(rng, spec, L, n_classes=2):
    base = LinearSoftmaxDenoiser.zeros(spec, L, n_classes)
    return base.with_params(**{k: rng.normal(size=v.shape) for k, v in base.params().items()})


# ---- guidance ----

def test_cfg_combine_examples():
    u, c = np.array([0.3, -1.7, 2.2]), np.array([1.1, 0.4, -0.9])
    assert cfg_combine(u, c, 0.0) is not u
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)
    np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
    assert cfg_combine(np.array([0.0]), np.array([1.0]), 2.0)[0] == 2.0
    with pytest.raises(ContractError):
        cfg_combine(np.zeros(2), np.zeros(3), 0.5)


def test_cfg_config_schedule():
    cfg = CfgConfig("linear", w_lo=1.0, w_hi=6.5)
    assert cfg.weight(1, 12) == 1.0 and cfg.weight(12, 12) == 6.5
    assert cfg.weight(1, 1) == 1.0
    assert CfgConfig("constant", w=3.0).weight(5, 9) == 3.0
    for bad in (dict(w=-1.0), dict(w_lo=2.0, w_hi=1.0), dict(mode="cosine"), dict(space="score")):
        with pytest.raises(ContractError):
            CfgConfig(**bad)


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_guided_logits_reduce_at_endpoints(rng, w):
    spec = VocabSpec(3, 2)
    den = _random_linear(rng, spec, 4)
    x = rng.integers(spec.size, size=(6, 4))
    guide = Guide(den, 1, CfgConfig("constant", w=w), K=4)
    target = den.predict_logits(x, 0.5, None if w == 0 else 1)
    np.testing.assert_array_equal(guide.logits(x, 0.5, 1), target)


def test_probability_space_guidance(rng):
    spec = VocabSpec(3, 1)
    den = _random_linear(rng, spec, 2)
    x = rng.integers(spec.size, size=(5, 2))
    pu, pc = den.predict(x, 0.5, None), den.predict(x, 0.5, 0)
    p = Guide(den, 0, CfgConfig("constant", w=0.5, space="prob"), K=2).probs(x, 0.5, 1)
    np.testing.assert_allclose(p, 0.5 * (pu + pc), atol=1e-15)
    strong = Guide(den, 0, CfgConfig("constant", w=5.0, space="prob"), K=2).probs(x, 0.5, 1)
    assert (strong >= 0).all()
    np.testing.assert_allclose(strong.sum(axis=-1), 1.0)


def test_unknown_label_rejected():
    with pytest.raises(ContractError):
        sample_rehash(_exact(), 4, np.random.default_rng(0), 2, label=5)


# ---- gumbel ----

def test_gumbel_intensity_and_sweep():
    assert GumbelConfig(2.0).intensity(0.25) == 0.5
    with pytest.raises(ContractError):
        GumbelConfig(-0.1)
    gs = swept_gumbel_configs(0)
    assert len(gs) == 3 and all(0.5 <= g.g0 <= 4.0 for g in gs)
    assert gs == swept_gumbel_configs(0) and gs != swept_gumbel_configs(1)


def test_gumbel_max_matches_softmax():
    rng = np.random.default_rng(21)
    logits = rng.normal(size=16)
    n = 200_000
    draws = (logits + rng.gumbel(size=(n, 16))).argmax(axis=1)
    observed = np.bincount(draws, minlength=16)
    assert stats.chisquare(observed, n * softmax(logits)).pvalue > 1e-3


# ---- rehash ----

def test_rehash_final_step_decodes_everything(rng):
    spec = VocabSpec(3, 4)
    den = UniformDenoiser(spec, 6)
    x = initial_state(50, 6, spec, rng)
    out = rehash_step(x, 0.3, 0.0, Guide(den, None, None, 1), 1, LINEAR, spec, rng)
    assert (out < spec.d).all()


def test_rehash_step_probabilities(rng):
    spec = VocabSpec(2, 2)
    n = 200_000
    den = UniformDenoiser(spec, 1)
    x = initial_state(n, 1, spec, rng)
    out = rehash_step(x, 1.0, 0.5, Guide(den, None, None, 2), 1, LINEAR, spec, rng).ravel()
    for p, hit in [(0.25, out == 0), (0.25, out == 1), (0.5, out >= 2)]:
        assert abs(hit.mean() - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_rehash_keeps_decoded_positions(rng):
    spec = VocabSpec(2, 3)
    den = UniformDenoiser(spec, 4)
    x = np.array([[0, 2, 1, 4]] * 100)
    out = rehash_step(x, 0.8, 0.4, Guide(den, None, None, 3), 1, LINEAR, spec, rng)
    assert (out[:, 0] == 0).all() and (out[:, 2] == 1).all()


def test_rehash_resampling_is_invisible_to_exact_denoiser(rng):
    data = generate_grid_patterns(3, 2, classes=2, m=4)
    den = ExactPosteriorDenoiser(data)
    x = data.sequences[:4].copy()
    x[:, ::2] = data.spec.d + rng.integers(4, size=x[:, ::2].shape)
    y = np.where(x >= data.spec.d, data.spec.d + rng.integers(4, size=x.shape), x)
    np.testing.assert_array_equal(den.predict(x, 0.6), den.predict(y, 0.6))


def _joint_independent(den, spec):
    """Product of fully-masked marginals, enumerated over the 4 outcomes."""
    p = den.predict(np.full(2, spec.d), 1.0)
    return {(a, b): p[0, a] * p[1, b] for a, b in itertools.product(range(2), repeat=2)}


def test_one_step_rehash_is_independent_per_position():
    data = tiny_dataset()
    den = _exact(data)
    run = generate("rehash", den, 1, 100_000, seed=0)
    target = _joint_independent(den, data.spec)
    assert all(v == 0.25 for v in target.values())
    assert tv_distance(empirical_distribution(run), target) < 0.01


def test_sampler_is_deterministic():
    den = _exact()
    for name in ("rehash", "mvtm", "dfm", "hybrid"):
        a = generate(name, den, 8, 500, seed=3).samples
        b = generate(name, den, 8, 500, seed=3).samples
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("fn", [sample_rehash, sample_mvtm, sample_dfm, sample_hybrid])
def test_output_fully_decoded(fn, rng):
    data = generate_grid_patterns(3, 3, classes=2, m=3)
    den = _random_linear(rng, data.spec, data.length)
    for timeline in ("linear", "cosine", "arccos", "square"):
        run = fn(den, 5, rng, 64, timeline=timeline, label=1,
                 cfg=CfgConfig("linear", w_lo=1.0, w_hi=3.0))
        assert (run.samples < data.spec.d).all()
        assert run.samples.shape == (64, 9)


@pytest.mark.parametrize("fn", [sample_rehash, sample_mvtm])
def test_monotone_unmasking(fn, rng):
    data = generate_grid_patterns(3, 2, classes=1, m=2)
    den = _random_linear(rng, data.spec, data.length, n_classes=1)
    run = fn(den, 6, rng, 200, keep_trajectory=True)
    for prev, cur in zip(run.trajectory, run.trajectory[1:]):
        decoded = prev < data.spec.d
        np.testing.assert_array_equal(cur[decoded], prev[decoded])


def test_max_decode_caps_and_finishes(rng):
    data = generate_grid_patterns(3, 2, classes=1, m=2)
    den = _random_linear(rng, data.spec, data.length, n_classes=1)
    run = sample_rehash(den, 12, rng, 300, max_decode=1, keep_trajectory=True)
    counts = [(prev >= 2).sum(axis=1) - (cur >= 2).sum(axis=1)
              for prev, cur in zip(run.trajectory, run.trajectory[1:])]
    assert max(c.max() for c in counts) <= 1
    assert (run.samples < 2).all()
    # K < L forces the cap upward so decoding still completes
    short = sample_rehash(den, 4, rng, 300, max_decode=1)
    assert (short.samples < 2).all()


def test_max_decode_one_is_exact_on_tiny():
    data = tiny_dataset()
    run = generate("rehash", _exact(data), 8, 20_000, seed=5, max_decode=1)
    assert tv_distance(empirical_distribution(run), data.distribution()) < 0.02


# ---- mvtm ----

def test_mvtm_remask_count(rng):
    spec = VocabSpec(2, 1)
    den = UniformDenoiser(spec, 4)
    x = np.full((100, 4), spec.d)
    out = mvtm_step(x, 1.0, 0.75, Guide(den, None, None, 4), 1, GumbelConfig(1.0), LINEAR, spec, rng)
    assert ((out >= spec.d).sum(axis=1) == 3).all()
    final = mvtm_step(out, 0.25, 0.0, Guide(den, None, None, 4), 4, GumbelConfig(1.0), LINEAR, spec, rng)
    assert (final < spec.d).all()


def test_mvtm_remask_clamped(rng):
    spec = VocabSpec(2, 1)
    den = UniformDenoiser(spec, 4)
    x = np.array([[0, 1, 0, 2]] * 10)
    out = mvtm_step(x, 0.95, 0.9, Guide(den, None, None, 4), 1, GumbelConfig(), LINEAR, spec, rng)
    np.testing.assert_array_equal(out[:, :3], x[:, :3])
    assert (out[:, 3] == spec.d).all()


def test_mvtm_ties_break_by_position():
    spec = VocabSpec(2, 1)
    den = UniformDenoiser(spec, 4)
    x = np.full((1, 4), spec.d)
    out = mvtm_step(x, 1.0, 0.5, Guide(den, None, None, 2), 1, GumbelConfig(0.0), LINEAR, spec,
                    np.random.default_rng(0))
    # equal confidence everywhere: the two lowest positions are re-masked
    np.testing.assert_array_equal(out, [[2, 2, 0, 0]])


def test_mvtm_without_noise_is_seed_free():
    data = ToyDataset(VocabSpec(2, 1), np.array([[0, 1, 1], [1, 0, 0], [0, 0, 0]]), (None,) * 3,
                      np.array([0.5, 0.3, 0.2]))
    den = _exact(data)
    runs = [sample_mvtm(den, 3, np.random.default_rng(s), 20, gumbel=GumbelConfig(0.0)).samples
            for s in (0, 1)]
    np.testing.assert_array_equal(runs[0], runs[1])
    assert len(np.unique(runs[0], axis=0)) == 1


# ---- dfm / hybrid ----

def test_dfm_zero_width_step_is_identity(rng):
    spec = VocabSpec(2, 2)
    den = UniformDenoiser(spec, 3)
    x = np.array([[0, 2, 3]] * 50)
    out = dfm_step(x, 0.5, 0.5, Guide(den, None, None, 1), 1, LINEAR, spec, rng)
    np.testing.assert_array_equal(out, x)


def test_dfm_jump_rate(rng):
    spec = VocabSpec(2, 1)
    den = UniformDenoiser(spec, 1)
    n = 200_000
    x = np.full((n, 1), spec.d)
    out = dfm_step(x, 0.5, 0.25, Guide(den, None, None, 2), 1, LINEAR, spec, rng)
    # lambda = (j_t - j_s)/j_t = 0.5 for every masked position
    p = -np.expm1(-0.5)
    assert abs((out < spec.d).mean() - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_dfm_tiny_dataset():
    data = tiny_dataset()
    run = generate("dfm", _exact(data), 32, 20_000, seed=2)
    assert tv_distance(empirical_distribution(run), data.distribution()) < 0.05


def test_hybrid_reductions(rng):
    data = generate_grid_patterns(3, 2, classes=2, m=3)
    den = _random_linear(rng, data.spec, data.length)
    K = 6
    kw = dict(timeline="cosine", label=0, cfg=CfgConfig("constant", w=2.0), keep_trajectory=True)
    base = sample_rehash(den, K, np.random.default_rng(4), 100, **kw)
    empty = sample_hybrid(den, K, np.random.default_rng(4), 100, dfm_steps=(), **kw)
    for a, b in zip(base.trajectory, empty.trajectory):
        np.testing.assert_array_equal(a, b)
    dfm = sample_dfm(den, K, np.random.default_rng(4), 100, **kw)
    full = sample_hybrid(den, K, np.random.default_rng(4), 100, dfm_steps=range(1, K + 1), **kw)
    np.testing.assert_array_equal(dfm.samples, full.samples)
    assert default_dfm_steps(7) == {4, 7} and default_dfm_steps(8) == {4, 8}
    with pytest.raises(ContractError):
        sample_hybrid(den, K, rng, 2, dfm_steps=(0,))


# ---- inpainting ----

def test_inpaint_all_valid_is_identity(rng):
    data = generate_grid_patterns(3, 2, classes=2, m=2)
    den = _random_linear(rng, data.spec, data.length)
    x = data.sequences[1]
    for sampler in ("rehash", "mvtm", "dfm", "hybrid"):
        run = sample_inpaint(x, den, 4, rng, 10, sampler=sampler)
        assert (run.samples == x).all()


def test_inpaint_all_masked_matches_rehash(rng):
    data = generate_grid_patterns(3, 2, classes=2, m=2)
    den = _random_linear(rng, data.spec, data.length)
    x = np.full(data.length, data.spec.d + 1)
    a = sample_inpaint(x, den, 5, np.random.default_rng(8), 50)
    b = sample_rehash(den, 5, np.random.default_rng(8), 50)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_inpaint_posterior_point_mass():
    data = tiny_dataset()
    run = sample_inpaint(np.array([0, data.spec.d]), _exact(data), 4, np.random.default_rng(0), 10_000)
    assert (run.samples[:, 0] == 0).all()
    assert (run.samples[:, 1] == 1).mean() > 0.99


def test_inpaint_shape_contract(rng):
    with pytest.raises(ContractError):
        sample_inpaint(np.array([0, 1, 2]), _exact(), 4, rng)


# ---- chunked generation ----

def test_generate_chunks_are_order_independent():
    den = _exact()
    whole = generate("rehash", den, 4, 300, seed=9, chunk=100).samples
    third = sample_rehash(den, 4, chunk_rng(9, 2), 100).samples
    np.testing.assert_array_equal(whole[200:], third)
    prefix = generate("rehash", den, 4, 200, seed=9, chunk=100).samples
    np.testing.assert_array_equal(whole[:200], prefix)


def test_generate_rejects_unknown_sampler():
    with pytest.raises(ContractError):
        generate("ancestral", _exact(), 4, 10, seed=0)
