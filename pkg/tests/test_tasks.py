import numpy as np
import pytest

from kdistill.model import ConfigError
from kdistill.tasks import CLS_ID, FIRST_MARKER, PAD_ID, SyntheticTaskSpec, generate_task, rule_labels


def brute_sequence_label(ids, c):
    counts = [sum(1 for t in ids if t == FIRST_MARKER + k) for k in range(c)]
    return counts.index(max(counts))


@pytest.mark.parametrize("kind", ["sequence", "token"])
def test_same_seed_same_data(kind):
    spec = SyntheticTaskSpec(kind, num_train=200, num_eval=100, noise_rate=0.1, seed=4)
    a, b = generate_task(spec), generate_task(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.token_ids, y.token_ids) and np.array_equal(x.labels, y.labels)


def test_different_seed_differs():
    a = generate_task(SyntheticTaskSpec(num_train=50, num_eval=50, seed=0))[0]
    b = generate_task(SyntheticTaskSpec(num_train=50, num_eval=50, seed=1))[0]
    assert not np.array_equal(a.token_ids, b.token_ids)


@pytest.mark.parametrize("kind", ["sequence", "token"])
def test_train_eval_disjoint(kind):
    train, evals = generate_task(SyntheticTaskSpec(kind, num_train=500, num_eval=500))
    seen = {r.tobytes() for r in train.token_ids}
    assert not any(r.tobytes() in seen for r in evals.token_ids)


def test_default_labels_balanced():
    train, evals = generate_task(SyntheticTaskSpec())
    for d in (train, evals):
        frac = np.bincount(d.clean_labels, minlength=2) / len(d)
        assert np.all(np.abs(frac - 0.5) < 0.05)


def test_balanced_multiclass():
    train, _ = generate_task(SyntheticTaskSpec(num_classes=4, num_train=2000))
    frac = np.bincount(train.clean_labels, minlength=4) / len(train)
    assert np.all(np.abs(frac - 0.25) < 0.05)


def test_structure():
    train, _ = generate_task(SyntheticTaskSpec(num_train=300, num_eval=10))
    assert np.all(train.token_ids[:, 0] == CLS_ID)
    assert np.array_equal(train.mask, train.token_ids != PAD_ID)
    lengths = train.mask.sum(1)
    assert lengths.min() >= 9 and lengths.max() <= 16
    # Padding only at the tail.
    assert all(np.all(np.diff(row.astype(int)) <= 0) for row in train.mask)


def test_sequence_rule_matches_recount():
    train, evals = generate_task(SyntheticTaskSpec(num_classes=3, num_train=300, num_eval=100))
    for d in (train, evals):
        for ids, m, y in zip(d.token_ids, d.mask, d.clean_labels):
            assert brute_sequence_label(ids[m].tolist(), 3) == y


def test_token_rule_matches_recount():
    train, _ = generate_task(SyntheticTaskSpec("token", num_classes=3, num_train=50, num_eval=10))
    for ids, m, y in zip(train.token_ids, train.mask, train.clean_labels):
        for t in range(len(ids)):
            if m[t]:
                prev = ids[t - 1] if t > 0 else 0
                assert y[t] == (ids[t] + prev) % 3


def test_noise_free_rule_oracle_is_perfect():
    _, evals = generate_task(SyntheticTaskSpec(noise_rate=0.3))
    pred = rule_labels("sequence", evals.token_ids, evals.mask, 2)
    assert np.mean(pred == evals.labels) == 1.0


def test_noise_only_on_train():
    train, evals = generate_task(SyntheticTaskSpec(noise_rate=0.2))
    flipped = np.mean(train.labels != train.clean_labels)
    assert 0.15 < flipped < 0.25
    assert np.array_equal(evals.labels, evals.clean_labels)


def test_batches_cover_everything():
    train, _ = generate_task(SyntheticTaskSpec(num_train=70, num_eval=5))
    sizes = [b.size for b in train.batches(32, np.random.default_rng(0))]
    assert sizes == [32, 32, 6] and train.num_batches(32) == 3


@pytest.mark.parametrize("kw", [{"num_classes": 1}, {"noise_rate": 1.0}, {"kind": "pair"}, {"vocab_size": 3}])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(**kw)
