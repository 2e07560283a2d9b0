import numpy as np
import pytest
import torch
from scipy import stats

from agents import (
    CHECKPOINT_VERSION,
    ActorCritic,
    PPOAgent,
    RandomAgent,
    RolloutBuffer,
    UpdateAbortedError,
    clipped_surrogate_loss,
    evaluate,
    load_checkpoint,
    normalize_advantages,
    ppo_update,
    random_policy,
    save_checkpoint,
    to_action,
    train,
)
from config import ConfigError, TrainConfig
from env_core import ActionSpec, Observation, derive_rng, validate_action
from env_heist import HeistEnv
from env_solidrally import SolidRallyEnv

TINY = TrainConfig(total_steps=64, rollout_length=32, epochs=2, minibatch_size=16, seed=3)


def heist_policy(seed=0):
    torch.manual_seed(seed)
    return ActorCritic(344, HeistEnv.action_spec, hidden_size=16)


def test_sampled_actions_are_valid():
    policy = heist_policy()
    generator = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        discrete, pre_tanh, log_prob, value = policy.sample(rng.normal(size=344), generator)
        action = to_action(discrete, pre_tanh)
        validate_action(HeistEnv.action_spec, action)
        assert np.isfinite(log_prob) and np.isfinite(value)


def test_branch_probabilities_sum_to_one():
    policy = heist_policy()
    logits, mean, value = policy(torch.randn(4, 344))
    assert len(logits) == 3
    for branch_logits in logits:
        assert torch.allclose(torch.softmax(branch_logits, dim=-1).sum(-1), torch.ones(4))
    assert mean.shape == (4, 2)
    assert value.shape == (4,)


def test_ratio_is_one_before_any_update():
    policy = heist_policy()
    generator = torch.Generator().manual_seed(1)
    rng = np.random.default_rng(1)
    obs, discrete, pre_tanh, old = [], [], [], []
    for _ in range(32):
        o = rng.normal(size=344).astype(np.float32)
        d, p, log_prob, _ = policy.sample(o, generator)
        obs.append(o)
        discrete.append(d)
        pre_tanh.append(p)
        old.append(log_prob)
    log_prob, _, _ = policy.evaluate_actions(
        torch.as_tensor(np.stack(obs)), torch.as_tensor(discrete), torch.as_tensor(np.stack(pre_tanh))
    )
    ratio = torch.exp(log_prob - torch.as_tensor(old))
    assert torch.allclose(ratio, torch.ones(32), atol=1e-5)


def test_clipped_objective_reduces_to_mean_advantage_at_unit_ratio():
    advantages = torch.tensor([1.0, -2.0, 0.5])
    assert clipped_surrogate_loss(torch.ones(3), advantages, 0.2).item() == pytest.approx(-advantages.mean().item())


def test_clipped_objective_caps_ratio():
    loss = clipped_surrogate_loss(torch.tensor([1.5, 0.5]), torch.tensor([1.0, -1.0]), 0.2)
    assert loss.item() == pytest.approx(-(1.2 - 0.8) / 2)


def test_clipped_objective_gradient_matches_finite_differences():
    advantages = torch.tensor([1.0, -0.5, 2.0, -1.5], dtype=torch.float64)
    ratio = torch.tensor([0.9, 1.1, 1.5, 0.5], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda r: clipped_surrogate_loss(r, advantages, 0.2), (ratio,))


def test_log_prob_gradient_matches_finite_differences():
    torch.manual_seed(0)
    policy = ActorCritic(6, ActionSpec((3, 2), 2), hidden_size=8).double()
    obs = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    discrete = torch.tensor([[0, 1], [2, 0], [1, 1]])
    pre_tanh = torch.randn(3, 2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda o: policy.evaluate_actions(o, discrete, pre_tanh)[0], (obs,))


def test_normalized_advantages_have_zero_mean_unit_variance():
    normalized = normalize_advantages(torch.tensor([1.0, 2.0, 3.0, 10.0]))
    assert normalized.mean().item() == pytest.approx(0.0, abs=1e-6)
    assert normalized.std(unbiased=False).item() == pytest.approx(1.0, abs=1e-5)


def filled_buffer(rewards, values, dones):
    buffer = RolloutBuffer()
    for r, v, d in zip(rewards, values, dones):
        buffer.add(np.zeros(4, dtype=np.float32), (0,), np.zeros(0, dtype=np.float32), 0.0, r, v, d)
    return buffer


def test_gae_stops_at_episode_end():
    buffer = filled_buffer([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [False, False, True])
    advantages, returns = buffer.compute_gae(last_value=100.0, gamma=0.5, gae_lambda=1.0)
    assert advantages.tolist() == [1.75, 1.5, 1.0]
    assert returns.tolist() == [1.75, 1.5, 1.0]


def test_gae_bootstraps_from_last_value():
    buffer = filled_buffer([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [False, True, False])
    advantages, _ = buffer.compute_gae(last_value=2.0, gamma=0.5, gae_lambda=1.0)
    assert advantages.tolist() == [1.5, 1.0, 2.0]


def test_non_finite_loss_restores_parameters():
    policy = ActorCritic(4, ActionSpec((2,)), hidden_size=8)
    optimizer = torch.optim.Adam(policy.parameters(), lr=1e-3)
    buffer = filled_buffer([1.0, float("nan"), 0.5, 0.0], [0.0] * 4, [False] * 4)
    before = {k: v.clone() for k, v in policy.state_dict().items()}
    with pytest.raises(UpdateAbortedError):
        ppo_update(policy, optimizer, buffer, TrainConfig(epochs=1, minibatch_size=4), torch.Generator())
    for key, value in policy.state_dict().items():
        assert torch.equal(value, before[key])


def test_training_is_deterministic(tmp_path):
    log_path = tmp_path / "train_log.csv"
    first, rows = train(SolidRallyEnv(track_affect=False), TINY, progress=False, log_path=str(log_path))
    second, _ = train(SolidRallyEnv(track_affect=False), TINY, progress=False)
    assert len(rows) == 2
    assert rows[-1]["steps"] == 64
    assert log_path.exists()
    for key, value in first.state_dict().items():
        assert torch.equal(value, second.state_dict()[key])


def test_behaviour_only_training_never_queries_corpus(solid_corpus):
    before = solid_corpus.query_count
    train(SolidRallyEnv(corpus=solid_corpus, track_affect=False), TINY, progress=False)
    assert solid_corpus.query_count == before


def test_random_policy_ignores_observation():
    spec = HeistEnv.action_spec
    a = random_policy(None, derive_rng(0, "agent"), spec)
    b = random_policy(Observation(np.ones((9, 9), dtype=np.int64), np.ones(20)), derive_rng(0, "agent"), spec)
    assert a == b


def test_random_agent_continuous_actions_are_uniform():
    agent = RandomAgent(HeistEnv.action_spec)
    rng = np.random.default_rng(0)
    values = np.array([agent.act(None, rng).continuous for _ in range(3000)])
    for slot in range(2):
        assert stats.kstest(values[:, slot], "uniform", args=(-1.0, 2.0)).pvalue > 0.001


def test_evaluate_records_affect_and_normalized_score(solid_corpus):
    env = SolidRallyEnv(corpus=solid_corpus)
    records = evaluate(RandomAgent(env.action_spec), env, n_runs=2, seed=10)
    assert [r.seed for r in records] == [10, 11]
    for record in records:
        assert 0.0 <= record.normalized_score <= 1.0
        assert len(record.affect_values) == 39
        assert record.mean_affect == pytest.approx(np.mean(record.affect_values))
        assert record.ticks == 1200
    again = evaluate(RandomAgent(env.action_spec), env, seeds=[10, 11])
    assert again == records


def test_evaluate_without_corpus_has_no_affect():
    env = SolidRallyEnv()
    record = evaluate(RandomAgent(env.action_spec), env, n_runs=1)[0]
    assert record.affect_values == ()
    assert np.isnan(record.mean_affect)


def test_checkpoint_round_trip(tmp_path):
    policy = heist_policy(seed=4)
    path = str(tmp_path / "checkpoint.pt")
    save_checkpoint(path, policy, "heist", TrainConfig(hidden_size=16))
    restored, payload = load_checkpoint(path, game="heist")
    assert payload["version"] == CHECKPOINT_VERSION
    for key, value in policy.state_dict().items():
        assert torch.equal(value, restored.state_dict()[key])
    agent_a, agent_b = PPOAgent(policy, 4), PPOAgent(restored, 4)
    obs = HeistEnv().reset(0)
    assert agent_a.act(obs, np.random.default_rng(1)) == agent_b.act(obs, np.random.default_rng(1))


def test_checkpoint_for_other_game_is_rejected(tmp_path):
    path = str(tmp_path / "checkpoint.pt")
    save_checkpoint(path, heist_policy(), "heist", TrainConfig(hidden_size=16))
    with pytest.raises(ConfigError):
        load_checkpoint(path, game="solid")
    with pytest.raises(ConfigError):
        load_checkpoint(str(tmp_path / "missing.pt"))
