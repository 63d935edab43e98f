import numpy as np
import pytest

from qbdc import committee as cm
from qbdc import data, nn
from qbdc.trainer import RmsPropState, TrainOptions, evaluate, mean_loss, train_until_early_stop

from conftest import perturb_params, small_conv_net, small_mlp
from oracles import numeric_grad, rel_error


@pytest.fixture(scope="module")
def trained():
    """An MLP trained with early stopping on a 4-class blob task."""
    ds = data.synthetic_blobs(4, 150, 5, 3.0, seed=7, spread=0.5)
    x, y = ds.images[:400], ds.labels[:400]
    vx, vy = ds.images[400:], ds.labels[400:]
    net = small_mlp(np.random.default_rng(0), dims=5, hidden=(16, 12), classes=4, dtype=np.float32)
    train_until_early_stop(net, x, y, vx, vy, TrainOptions(20, 200, 20),
                           RmsPropState.zeros_like(net, learning_rate=0.005), np.random.default_rng(1))
    return net, x, y, vx, vy


def test_zero_dropout_members_match_full_network(rng):
    net = small_conv_net(rng)
    com = cm.dropout_sampling(net, 0.0, 3, rng)
    x = rng.random((5, 2, 8, 8))
    full = nn.forward(net, x)[0]
    for m in com.members:
        assert all(k.all() for k in m.mask.keep.values())
        np.testing.assert_array_equal(m.logits(x), full)
        np.testing.assert_array_equal(m.predict(x), nn.predict(net, x))


def test_drop_frequency_near_p(rng):
    # wide layers: resampling all-dropped layers would bias narrow ones
    net = small_mlp(rng, hidden=(24, 16))
    masks = [cm.DropoutMask.sample(net, 0.5, rng) for _ in range(1000)]
    for k in masks[0].keep:
        freq = 1 - np.mean([m.keep[k] for m in masks], axis=0)
        assert np.all((freq >= 0.45) & (freq <= 0.55)), (k, freq)


def test_sampling_is_reproducible_and_distinct():
    net = small_mlp(np.random.default_rng(0), hidden=(20, 20))

    def keeps(seed):
        com = cm.dropout_sampling(net, 0.5, 3, np.random.default_rng(seed))
        return [np.concatenate(list(m.mask.keep.values())) for m in com.members]

    a, b = keeps(42), keeps(42)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert len({u.tobytes() for u in a}) == 3


def test_mask_never_empties_a_layer(rng):
    net = small_conv_net(rng)
    for _ in range(200):
        mask = cm.DropoutMask.sample(net, 0.9, rng)
        assert all(k.any() for k in mask.keep.values())
        assert len(mask.keep) == net.depth - 1


def test_invalid_sampling_arguments(rng):
    net = small_mlp(rng)
    with pytest.raises(ValueError):
        cm.dropout_sampling(net, 1.0, 3, rng)
    with pytest.raises(ValueError):
        cm.dropout_sampling(net, 0.5, 0, rng)


def test_mask_equals_zeroed_weights(rng):
    """Masked forward == unmasked forward on weights with dropped filters zeroed, kept ones rescaled."""
    net = small_conv_net(rng)
    mask = cm.DropoutMask.sample(net, 0.5, rng)
    x = rng.random((4, 2, 8, 8))
    edited = net.copy()
    for k, keep in mask.keep.items():
        scale = keep / (1 - mask.p)
        w, b = edited.params[2 * k], edited.params[2 * k + 1]
        if w.ndim == 4:
            w *= scale[:, None, None, None]
        else:
            w *= scale[None, :]
        b *= scale
    np.testing.assert_allclose(nn.forward(net, x, mask)[0], nn.forward(edited, x)[0],
                               rtol=0, atol=1e-12)


def test_last_layer_gradient_matches_finite_differences(rng):
    net = perturb_params(small_conv_net(rng), rng)
    member = cm.dropout_sampling(net, 0.5, 1, rng).members[0]
    x, y = rng.random((4, 2, 8, 8)), np.array([0, 1, 2, 3])
    assert np.abs(member.features(x)).sum() > 0
    gw, gb = cm._dense_step(member.weight, member.bias, member.features(x), y)

    def loss():
        return nn.softmax_cross_entropy(member.logits(x), y)

    assert rel_error(gw, numeric_grad(loss, member.weight)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, member.bias)) < 1e-4
    # same gradient from the generic backward pass
    _, trace = nn.forward(member.net, x, member.mask)
    full = nn.backward(member.net, trace, y)
    np.testing.assert_allclose(full.params[-2], gw, atol=1e-14)


def test_retraining_converged_net_keeps_loss(trained):
    net, x, y, vx, vy = trained
    member = cm.dropout_sampling(net, 0.0, 1, np.random.default_rng(3)).members[0]
    # converge the last layer on the training loss itself first
    cm.retrain_last_layer(member, x, y, x, y, TrainOptions(400, 3000, 50), np.random.default_rng(0),
                          learning_rate=0.003)
    before = mean_loss(member.net, x, y)
    cm.retrain_last_layer(member, x, y, vx, vy, TrainOptions(20, 20, 2), np.random.default_rng(4))
    assert abs(mean_loss(member.net, x, y) - before) < 1e-3


def test_retraining_touches_only_private_layer(trained):
    net, x, y, vx, vy = trained
    before = [p.copy() for p in net.params]
    com = cm.dropout_sampling(net, 0.5, 3, np.random.default_rng(5))
    keeps = [{k: v.copy() for k, v in m.mask.keep.items()} for m in com.members]
    for m in com.members:
        cm.retrain_last_layer(m, x, y, vx, vy, TrainOptions(20, 20, 2), np.random.default_rng(6))
    for p, q in zip(net.params, before):
        assert p.tobytes() == q.tobytes()
    for m, k in zip(com.members, keeps):
        for layer in k:
            np.testing.assert_array_equal(m.mask.keep[layer], k[layer])
            assert not m.mask.keep[layer].flags.writeable
        for p, q in zip(m.net.params[:-2], net.params[:-2]):
            assert p is q
    assert any(not np.array_equal(m.weight, net.params[-2]) for m in com.members)


def test_crippled_member_is_worse_than_full(trained):
    net, x, y, vx, vy = trained
    widths = net.hidden_widths()
    keep = {0: np.eye(1, widths[0], dtype=bool)[0], 1: np.ones(widths[1], dtype=bool)}
    member = cm.CommitteeMember(net, cm.DropoutMask(keep, 0.5), *[p.copy() for p in net.last_layer()])
    cm.retrain_last_layer(member, x, y, vx, vy, TrainOptions(20, 20, 2), np.random.default_rng(2))
    assert evaluate(member.net, x, y, member.mask) > evaluate(net, x, y)


def test_retrain_rejects_empty_pool(trained):
    net, x, y, vx, vy = trained
    member = cm.dropout_sampling(net, 0.5, 1, np.random.default_rng(0)).members[0]
    with pytest.raises(ValueError):
        cm.retrain_last_layer(member, x[:0], y[:0], vx, vy, TrainOptions(), np.random.default_rng(0))


@pytest.mark.parametrize("votes,score,label", [
    ([7, 7, 7], 0, 7),
    ([7, 2, 7], 1, 7),
    ([3, 1, 5], 2, 1),
    ([4, 4, 2, 2], 2, 2),
    ([9], 0, 9),
])
def test_disagreement_examples(votes, score, label):
    assert cm.disagreement_score(votes) == score
    assert cm.plurality(votes) == label


def test_score_candidates(rng):
    net = small_mlp(rng, hidden=(30, 30), classes=5)
    x = rng.random((40, 6)) * 4
    idx = np.arange(100, 140)
    single = cm.dropout_sampling(net, 0.5, 1, rng)
    assert all(s == 0 for _, s in cm.score_candidates(single, x, idx))

    com = cm.dropout_sampling(net, 0.5, 5, rng)
    scored = cm.score_candidates(com, x, idx)
    votes = com.votes(x)
    assert [s for _, s in scored] == [cm.disagreement_score(votes[:, j]) for j in range(40)]
    assert [i for i, _ in scored] == list(idx)
    assert all(0 <= s <= 4 for _, s in scored)
    perm = rng.permutation(40)
    assert cm.score_candidates(com, x[perm], idx[perm]) == [scored[p] for p in perm]
    with pytest.raises(ValueError):
        cm.score_candidates(com, x[:0], idx[:0])
