import numpy as np
import pytest

from affect_model import AffectModelConfig, CorpusFormatError, FeatureWindow, build_corpus
from env_core import (
    Action,
    ActionSpec,
    ActionValidationError,
    EpisodeClock,
    EpisodeLifecycleError,
    derive_rng,
    flatten_observation,
    run_actions,
    sample_action,
    validate_action,
)
from env_heist import HeistEnv
from env_pirates import PiratesEnv
from env_solidrally import SolidRallyEnv
from reward_engine import BlendConfig


def random_actions(env, seed, n):
    rng = derive_rng(seed, "agent")
    return [env.sample_action(rng) for _ in range(n)]


def test_action_spec_rejects_single_option_branch():
    with pytest.raises(ValueError):
        ActionSpec((3, 1))


def test_noop_picks_middle_option():
    assert ActionSpec((3, 3, 2), 2).noop() == Action((1, 1, 0), (0.0, 0.0))


@pytest.mark.parametrize("action", [
    Action((1,), ()),
    Action((3, 0), ()),
    Action((-1, 0), ()),
    Action((1.0, 0), ()),
    Action((True, 0), ()),
    Action((1, 0), (0.0,)),
])
def test_validate_action_rejects_malformed(action):
    with pytest.raises(ActionValidationError):
        validate_action(ActionSpec((3, 2), 0), action)


@pytest.mark.parametrize("value", [1.5, -1.01, float("nan"), float("inf")])
def test_validate_action_rejects_out_of_range_continuous(value):
    with pytest.raises(ActionValidationError):
        validate_action(ActionSpec((3, 3, 2), 2), Action((1, 1, 0), (0.0, value)))


def test_validate_action_accepts_numpy_integers():
    validate_action(ActionSpec((3, 2), 0), Action((np.int64(2), np.int32(1)), ()))


def test_derive_rng_is_stable_per_stream():
    a = derive_rng(3, "layout").random(5)
    b = derive_rng(3, "layout").random(5)
    c = derive_rng(3, "dynamics").random(5)
    d = derive_rng(4, "layout").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_sample_action_is_uniform_per_branch(rng):
    spec = ActionSpec((3, 3, 2), 2)
    samples = [sample_action(spec, rng) for _ in range(30000)]
    discrete = np.array([s.discrete for s in samples])
    continuous = np.array([s.continuous for s in samples])
    for branch, n in enumerate(spec.discrete_branches):
        counts = np.bincount(discrete[:, branch], minlength=n) / len(samples)
        assert np.allclose(counts, 1.0 / n, atol=0.02)
    assert continuous.min() >= -1.0 and continuous.max() <= 1.0
    assert abs(continuous.mean()) < 0.02


def test_sample_action_without_continuous_slots(rng):
    action = sample_action(ActionSpec((3, 3), 0), rng)
    assert action.continuous == ()


def test_episode_clock_for_rate():
    clock = EpisodeClock.for_rate(20)
    assert clock.max_ticks == 2400
    assert clock.window_ticks == 60
    assert clock.dt == pytest.approx(0.05)
    with pytest.raises(ValueError):
        EpisodeClock.for_rate(0)


def test_step_before_reset_raises():
    env = SolidRallyEnv()
    with pytest.raises(EpisodeLifecycleError):
        env.step(env.action_spec.noop())


def test_episode_ends_exactly_at_max_ticks():
    env = SolidRallyEnv()
    env.reset(0)
    noop = env.action_spec.noop()
    for _ in range(env.clock.max_ticks - 1):
        assert not env.step(noop).done
    last = env.step(noop)
    assert last.done
    assert last.tick == 1200
    with pytest.raises(EpisodeLifecycleError):
        env.step(noop)
    # resetすれば再開できる
    env.reset(1)
    assert env.step(noop).tick == 1


def test_invalid_action_does_not_advance_episode():
    env = PiratesEnv()
    env.reset(0)
    before = env.state
    with pytest.raises(ActionValidationError):
        env.step(Action((3, 0), ()))
    assert env.state is before
    assert env.clock.tick_index == 0


@pytest.mark.parametrize("env_cls", [PiratesEnv, HeistEnv, SolidRallyEnv])
def test_replay_is_deterministic(env_cls):
    env = env_cls()
    actions = random_actions(env, 5, 300)
    first = run_actions(env, 11, actions)
    second = run_actions(env, 11, actions)
    assert first == second
    assert [r.observation.to_bytes() for r in first] == [r.observation.to_bytes() for r in second]


def test_generated_layouts_depend_on_seed():
    env = PiratesEnv(layout="generated")
    env.reset(1)
    first = env.level.base_ids.copy()
    env.reset(1)
    assert np.array_equal(first, env.level.base_ids)
    env.reset(2)
    assert not np.array_equal(first, env.level.base_ids)


@pytest.mark.parametrize("env_cls, size", [(PiratesEnv, 733), (HeistEnv, 344), (SolidRallyEnv, 50)])
def test_flat_observation_size(env_cls, size):
    env = env_cls()
    obs = env.reset(0)
    flat = env.flat(obs)
    assert env.flat_observation_size == size
    assert flat.shape == (size,)
    assert flat.dtype == np.float32


def test_flatten_one_hot_encodes_each_cell():
    env = PiratesEnv()
    obs = env.reset(0)
    flat = flatten_observation(obs, env.n_grid_ids)
    one_hot = flat[:121 * 6].reshape(121, 6)
    assert np.array_equal(one_hot.sum(axis=1), np.ones(121))
    assert np.array_equal(one_hot.argmax(axis=1), obs.grid.ravel())


def test_affect_emitted_only_on_window_boundaries(solid_corpus):
    env = SolidRallyEnv(corpus=solid_corpus, blend_config=BlendConfig.for_game("solid", 0.5))
    env.reset(0)
    noop = env.action_spec.noop()
    results = [env.step(noop) for _ in range(env.clock.max_ticks)]
    emitted = [r for r in results if r.affect_emitted]
    assert len(emitted) == 39
    assert all(r.tick % 30 == 0 for r in emitted)
    assert emitted[0].tick == 60
    assert all(0.0 <= r.affect_signal <= 1.0 for r in emitted)
    assert all(r.affect_signal == 0.0 for r in results if not r.affect_emitted)
    assert env.schedule.emissions == [r.affect_signal for r in emitted]


def test_affect_windows_follow_tick_rate(solid_corpus):
    env = SolidRallyEnv(ticks_per_second=20, corpus=solid_corpus, blend_config=BlendConfig.for_game("solid", 0.5))
    env.reset(0)
    noop = env.action_spec.noop()
    ticks = []
    result = None
    while result is None or not result.done:
        result = env.step(noop)
        if result.affect_emitted:
            ticks.append(result.tick)
    assert result.tick == 2400
    assert len(ticks) == 39
    assert all(t % 60 == 0 for t in ticks)


def test_hold_last_repeats_previous_value(solid_corpus):
    env = SolidRallyEnv(corpus=solid_corpus, blend_config=BlendConfig.for_game("solid", 1.0),
                        affect_mode="hold_last")
    env.reset(0)
    rng = derive_rng(0, "agent")
    last = 0.0
    for _ in range(200):
        result = env.step(env.sample_action(rng))
        if result.affect_emitted:
            last = result.affect_signal
        assert result.affect_signal == last
        assert result.total_reward == result.affect_reward


def test_lambda_zero_training_env_never_queries(solid_corpus):
    env = SolidRallyEnv(corpus=solid_corpus, track_affect=False)
    before = solid_corpus.query_count
    env.reset(0)
    noop = env.action_spec.noop()
    for _ in range(120):
        result = env.step(noop)
        assert result.affect_signal == 0.0
        assert not result.affect_emitted
    assert solid_corpus.query_count == before


def test_total_reward_is_normalized_behaviour_at_lambda_zero(solid_corpus):
    env = SolidRallyEnv(corpus=solid_corpus)
    env.reset(3)
    rng = derive_rng(3, "agent")
    for _ in range(100):
        result = env.step(env.sample_action(rng))
        assert result.total_reward == pytest.approx(result.behaviour_reward / 2.0)


def test_corpus_from_another_game_is_rejected(pirates_corpus):
    with pytest.raises(CorpusFormatError):
        SolidRallyEnv(corpus=pirates_corpus)


def test_corpus_with_wrong_feature_length_is_rejected():
    sessions = [
        [FeatureWindow(name, i, (float(i), float(s)), a) for i, a in enumerate([0.1, 0.5, 0.2, 0.9])]
        for s, name in enumerate(("a", "b"))
    ]
    corpus = build_corpus(sessions, AffectModelConfig())
    with pytest.raises(CorpusFormatError):
        HeistEnv(corpus=corpus)
