import numpy as np
import pytest

from cralloc.core import ConfigError
from cralloc.qnet import (
    NonFiniteError,
    RemMixture,
    act,
    bcq_mask,
    constraint_layer,
    forward,
    gradients,
    head_outputs,
    init_params,
    load_params,
    policy_values,
    rem_combine,
    save_params,
    td_loss,
    td_loss_and_grads,
    trunk_forward,
)

SIZES = (2, 26, 2)


@pytest.fixture
def params():
    return init_params(12, SIZES, (16, 8), num_heads=4, imitation=True, seed=1)


def test_zero_network_outputs_zero():
    p = init_params(12, SIZES, (16, 8), seed=0, scale=0.0)
    q = forward(p, np.ones((3, 12)), 2)
    assert q.shape == (3, 26)
    assert np.all(q == 0)


def test_head_separation(params, rng):
    x = rng.normal(size=(5, 12))
    before = forward(params, x, 1)
    params.tensors["head.2.W"] += 1.0
    params.tensors["head.3.b"] -= 3.0
    assert np.array_equal(before, forward(params, x, 1))


def test_forward_rejects_nonfinite(params):
    x = np.zeros((1, 12))
    x[0, 3] = np.nan
    with pytest.raises(NonFiniteError):
        forward(params, x, 1)


def test_rem_examples(rng):
    per_head = rng.normal(size=(6, 4, 3))
    one_hot = RemMixture(np.array([0.0, 0.0, 1.0, 0.0]))
    assert np.array_equal(rem_combine(per_head, one_hot), per_head[:, 2, :])
    same = np.repeat(per_head[:, :1, :], 4, axis=1)
    assert np.allclose(rem_combine(same, RemMixture.uniform(4)), per_head[:, 0, :], rtol=0, atol=1e-15)
    for _ in range(1000):
        beta = RemMixture.sample(rng, 4)
        mixed = rem_combine(per_head, beta)
        assert np.all(mixed <= per_head.max(axis=1) + 1e-12)
        assert np.all(mixed >= per_head.min(axis=1) - 1e-12)


def test_rem_permutation_equivariant(rng):
    per_head = rng.normal(size=(3, 5, 2))
    beta = RemMixture.sample(rng, 5)
    perm = rng.permutation(5)
    assert np.allclose(rem_combine(per_head, beta), rem_combine(per_head[:, perm], RemMixture(beta.beta[perm])),
                       rtol=0, atol=1e-14)


def test_rem_simplex_tolerance():
    RemMixture(np.array([0.5, 0.5 + 5e-10]))
    with pytest.raises(ConfigError):
        RemMixture(np.array([0.5, 0.5 + 1e-8]))
    with pytest.raises(ConfigError):
        rem_combine(np.zeros((1, 3, 2)), RemMixture.uniform(2))


def test_constraint_layer():
    q = np.array([[5.0, 9.0]])
    c = np.array([[1.0, 4.0]])
    assert np.array_equal(constraint_layer(q, c, 0.0), q)
    assert constraint_layer(q, c, 2.0).tolist() == [[3.0, 1.0]]
    # linear in the multiplier
    twice = constraint_layer(constraint_layer(q, c, 0.5), c, 1.5)
    assert np.array_equal(twice, constraint_layer(q, c, 2.0))
    with pytest.raises(ConfigError):
        constraint_layer(q, c, -1.0)


def test_act_matches_enumeration(params, rng):
    x = rng.normal(size=(30, 12))
    costs = np.arange(26) * 0.1
    lam = 0.7
    a = act(params, lam, x, 2, costs)
    q = forward(params, x, 2)
    brute = np.argmax(q - lam * costs, axis=1)
    assert np.array_equal(a, brute)
    assert np.all(act(params, 1e9, x, 2, costs) == 0)


def test_act_invariant_to_q_shift(params, rng):
    x = rng.normal(size=(20, 12))
    costs = np.array([0.0, 1.0])
    base = act(params, 0.3, x, 1, costs)
    params.tensors["head.1.b"] += 0.25   # same shift for every action of every head
    assert np.array_equal(base, act(params, 0.3, x, 1, costs))


def test_bcq_mask_keeps_argmax(params, rng):
    h, _ = trunk_forward(params, rng.normal(size=(40, 12)))
    for thr in (0.0, 0.3, 1.0):
        mask = bcq_mask(params, h, 2, thr)
        assert mask.any(axis=1).all()
    assert bcq_mask(params, h, 2, 0.0).all()
    q, mask = policy_values(params, rng.normal(size=(4, 12)), 2, None, 0.3)
    assert mask is not None and q.shape == mask.shape


def test_zero_loss_zero_grad(params, rng):
    x = rng.normal(size=(9, 12))
    phases = np.array([1, 2, 3] * 3)
    actions = np.array([0, 5, 1] * 3)
    p = params.copy()
    for k in [k for k in p.tensors if k.startswith("imit")]:
        del p.tensors[k]
    h, _ = trunk_forward(p, x)
    targets = np.array([rem_combine(head_outputs(p, h[i:i + 1], t), RemMixture.uniform(4))[0, a]
                        for i, (t, a) in enumerate(zip(phases, actions))])
    loss, grads = td_loss_and_grads(p, x, phases, actions, targets)
    assert loss == pytest.approx(0.0, abs=1e-25)
    assert all(np.abs(g).max() < 1e-12 for g in grads.values())


def test_targets_are_constants(params, rng):
    # the gradient only involves the online parameters; a frozen copy supplying targets gets none
    x = rng.normal(size=(6, 12))
    phases = np.array([1, 2, 3, 1, 2, 3])
    actions = np.array([1, 3, 0, 0, 25, 1])
    frozen = params.copy()
    targets = forward(frozen, x, 1)[:, 0]
    g = gradients(params, x, phases, actions, targets)
    assert set(g) == set(params.tensors)
    assert np.array_equal(frozen.tensors["trunk.0.W"], params.tensors["trunk.0.W"])


def test_single_parameter_probe(params, rng):
    x = rng.normal(size=(12, 12))
    phases = np.tile([1, 2, 3], 4)
    actions = np.array([rng.integers(0, SIZES[t - 1]) for t in phases])
    targets = rng.normal(size=12)
    beta = RemMixture.sample(rng, 4)
    g = gradients(params, x, phases, actions, targets, beta)
    eps = 1e-6
    for name in ("trunk.0.W", "head.2.W", "imit.3.b"):
        w = params.tensors[name]
        i = np.unravel_index(int(np.argmax(np.abs(g[name]))), w.shape)
        keep = w[i]
        w[i] = keep + eps
        up = td_loss(params, x, phases, actions, targets, beta)
        w[i] = keep - eps
        down = td_loss(params, x, phases, actions, targets, beta)
        w[i] = keep
        fd = (up - down) / (2 * eps)
        assert abs(fd - g[name][i]) <= 1e-4 * max(abs(fd), abs(g[name][i]))


def test_nonfinite_targets_rejected(params):
    with pytest.raises(NonFiniteError):
        td_loss_and_grads(params, np.zeros((1, 12)), np.array([1]), np.array([0]), np.array([np.inf]))


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.npz"
    save_params(params, path, {"lambda": [0.1, 0.2, 0.3]})
    back, extra = load_params(path)
    assert extra == {"lambda": [0.1, 0.2, 0.3]}
    assert back.sizes == params.sizes and back.hidden == params.hidden and back.num_heads == 4
    for k, v in params.tensors.items():
        assert np.array_equal(v, back.tensors[k])
