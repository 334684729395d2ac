import numpy as np
import pytest
from helpers import random_network

from liplocal.certify import (
    VERDICTS,
    certify_batch,
    certify_sample,
    evaluate_dataset,
    pgd_attack,
    pgd_batch,
    summarize,
)
from liplocal.errors import DomainError
from liplocal.io_formats import synth_dataset
from liplocal.network import forward, make_toy_network, parse_architecture
from liplocal.trainer import TrainConfig, train

X_TOY = np.array([1.0, -1.0, 0.0])


def toy_two_class():
    net = make_toy_network()
    last = net.layers[-1]
    last.weight = np.array([[1.0, 1, 1], [0.5, -1, 2]])
    last.bias = np.zeros(2)
    last.out_shape = (2,)
    return net


def test_toy_readout_certifies_locally_only():
    net = toy_two_class()
    np.testing.assert_allclose(forward(net, X_TOY), [1.0, 0.5])
    r = certify_sample(net, X_TOY, 0, 0.1, tiers=("global", "local"))
    assert r.verdict == "certified_local"
    # only the third neuron varies, so the readout contributes the norm of its third column
    assert r.L_local == pytest.approx(np.sqrt(5) * 1.01**3, rel=1e-6)
    assert r.L_local < r.L_glob and r.margin > 0


def test_zero_eps_certifies_exactly_the_correct_samples():
    rng = np.random.default_rng(0)
    net = random_network(rng, 3)
    x = rng.standard_normal((30,) + net.input_shape)
    y = rng.integers(0, 3, 30)
    correct = np.argmax(forward(net, x), axis=1) == y
    for mode in ("simple", "bcp", "gloro", "gloro+bcp"):
        res, _ = certify_batch(net, x, y, 0.0, mode)
        assert [r.verdict == "certified_global" for r in res] == list(correct)
        assert all(r.verdict == "falsified_pgd" for r, c in zip(res, correct) if not c)


def test_negative_eps_rejected():
    with pytest.raises(DomainError):
        certify_batch(toy_two_class(), X_TOY[None], [0], -0.1)
    with pytest.raises(DomainError):
        pgd_attack(toy_two_class(), X_TOY, 0, -0.1)


def test_pgd_stays_in_ball_and_is_deterministic():
    rng = np.random.default_rng(1)
    net = random_network(rng, 3, conv_ok=False)
    x = rng.standard_normal((40,) + net.input_shape)
    y = np.argmax(forward(net, x), axis=1)
    eps = 0.8
    a1, f1, i1 = pgd_batch(net, x, y, eps, restarts=2, seed=5)
    a2, f2, i2 = pgd_batch(net, x, y, eps, restarts=2, seed=5)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_array_equal(i1, i2)
    assert f1.any()
    dist = np.linalg.norm((a1 - x).reshape(40, -1), axis=1)
    assert np.all(dist <= eps * (1 + 1e-12))
    assert np.all(np.argmax(forward(net, a1[f1]), axis=1) != y[f1])


def test_pgd_finds_nothing_on_certified_points():
    net = toy_two_class()
    assert pgd_attack(net, X_TOY, 0, 0.1) is None


def test_pgd_on_linear_model_reaches_boundary():
    net = parse_architecture("F(2)", (2,), 2)
    net.layers[0].weight = np.array([[1.0, 0.0], [0.0, 0.0]])
    net.layers[0].bias = np.zeros(2)
    x = np.array([0.3, 0.0])
    assert pgd_attack(net, x, 0, 0.25) is None
    adv = pgd_attack(net, x, 0, 0.35)
    assert adv is not None and adv[0] < 0


def random_results(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 3)
    x = rng.standard_normal((40,) + net.input_shape)
    y = np.argmax(forward(net, x), axis=1)
    y[:5] = (y[:5] + 1) % 3
    return net, x, y


@pytest.mark.parametrize("mode", ["simple", "bcp", "gloro+bcp"])
def test_summary_ordering_and_tier3_identity(mode):
    net, x, y = random_results(2)
    for eps in (0.01, 0.1, 0.5):
        res, _ = certify_batch(net, x, y, eps, mode)
        s = summarize(res)
        assert s["clean_acc"] >= s["pgd_acc"] >= s["certified_acc"] >= s["certified_global_acc"]
        assert s["frac_tier3"] == pytest.approx(1 - s["frac_certified_global"] - s["frac_falsified"])
        assert s["frac_tier3"] == pytest.approx(s["frac_certified_local"] + s["frac_undecided"])
        assert sum(s[f"frac_{k}"] for k in ("certified_global", "certified_local", "falsified", "undecided")) \
            == pytest.approx(1)
        assert all(r.verdict in VERDICTS for r in res)


def test_local_certificates_are_superset_of_global():
    for seed in range(3):
        net, x, y = random_results(10 + seed)
        for eps in (0.05, 0.2):
            g, _ = certify_batch(net, x, y, eps, "bcp", tiers=("global",))
            loc, _ = certify_batch(net, x, y, eps, "bcp", tiers=("local",))
            for a, b in zip(g, loc):
                if a.certified:
                    assert b.certified
                if b.certified:
                    assert b.L_local <= a.L_glob * (1 + 1e-9)


def test_certified_never_falsified():
    net, x, y = random_results(3)
    eps = 0.3
    cert, _ = certify_batch(net, x, y, eps, "bcp", tiers=("global", "local"))
    _, found, _ = pgd_batch(net, x, y, eps, restarts=3)
    assert not any(r.certified and f for r, f in zip(cert, found))


def test_untrained_network_certifies_almost_nothing():
    data = synth_dataset("gaussian_blobs", 200, seed=1)
    net = parse_architecture("F(32)-F(32)-F(2)", (2,), 2, seed=0)
    net.layers[0].weight *= 30
    s, _ = evaluate_dataset(net, data, 1.0, "simple")
    assert s["certified_acc"] <= 0.05


def test_evaluate_dataset_records_and_pool(tmp_path):
    from concurrent.futures import ThreadPoolExecutor

    data = synth_dataset("gaussian_blobs", 300, seed=2)
    cfg = TrainConfig(epochs=6, lr_decay_epoch=4, eps_sched_epochs=3, eps_target=0.3, batch_size=32,
                      initial_lr=1e-2, end_lr=1e-3)
    net, _, _ = train(parse_architecture("F(16)-F(16)-F(2)", (2,), 2), data, cfg)
    path = tmp_path / "rec.csv"
    s1, r1 = evaluate_dataset(net, data, 0.3, "bcp", batch_size=64, records_path=path)
    with ThreadPoolExecutor(4) as pool:
        s2, r2 = evaluate_dataset(net, data, 0.3, "bcp", batch_size=64, pool=pool)
    assert [r.verdict for r in r1] == [r.verdict for r in r2]
    assert s1["certified_acc"] > 0.5
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# id, verdict") and len(lines) == 301
    assert lines[1].split(", ")[0] == "0"
