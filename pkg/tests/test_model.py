import numpy as np
import pytest

from sscflow import diffcore as dc
from sscflow import flow as fl
from sscflow import latent as lt
from sscflow import oda as od
from sscflow.data import UNLABELED, IncompleteDataset, inject_mcar, normalize
from sscflow.diffcore import ContractError, DimensionError, Tape
from sscflow.model import (ConfigurationError, TrainConfig, blend, impute_and_classify,
                           loss_gamma, loss_theta, one_hot, predict_batch, train)

from conftest import assert_grad_close, central_diff

LOG_2PI = np.log(2 * np.pi)
FAST = dict(n_iterations=2, n_epochs=2, batch_size=32)


def random_flow(dim, rng, hidden=6, scale=0.4):
    p = fl.init_flow(dim, rng, hidden=hidden)
    return p.with_arrays({k: v + scale * rng.normal(size=v.shape) for k, v in p.named_arrays().items()})


def blob_data(n=120, seed=0, p=0.3, hide=0.2):
    r = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = r.normal(size=(n, 2)) * 0.4 + np.where(y[:, None] == 0, -2.0, 2.0)
    ds = IncompleteDataset(X, np.ones_like(X), y, ["a", "b"], ["f0", "f1"])
    ds, truth = inject_mcar(ds, p, seed)
    ds, stats = normalize(ds)
    hidden = np.flatnonzero(r.random(n) < hide)
    return ds, ds.hide_labels(hidden), hidden, truth.normalized(stats)


# -- blending ---------------------------------------------------------------

def test_blend_example():
    out = blend(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[9.0, 7.0]]))
    np.testing.assert_array_equal(out, [[1.0, 7.0]])


def test_blend_identities(rng):
    x, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(blend(x, np.ones((3, 4)), c), x)
    np.testing.assert_array_equal(blend(x, np.zeros((3, 4)), c), c)


def test_blend_contract():
    with pytest.raises(ContractError):
        blend(np.zeros((1, 2)), np.array([[0.5, 1.0]]), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        blend(np.zeros((1, 2)), np.ones((1, 3)), np.zeros((1, 2)))


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([1, UNLABELED]), 3),
                                  [[0, 1, 0], [0.5, 0.5, 0.5]])


# -- flow loss ----------------------------------------------------------------

def test_loss_theta_single_labeled_row_at_mean(rng):
    D = 4
    flow = fl.init_flow(D, rng)
    prior = lt.LatentPrior(rng.normal(size=(3, D)), np.full(3, 1 / 3))
    loss, _ = loss_theta(prior.means[[2]], np.array([2]), flow, prior)
    assert loss.item() == pytest.approx(D / 2 * LOG_2PI, abs=1e-12)


def test_loss_theta_single_class_unlabeled_equals_labeled(rng):
    flow = random_flow(3, rng)
    prior = lt.LatentPrior(rng.normal(size=(1, 3)), np.ones(1))
    x = rng.normal(size=(1, 3))
    a, _ = loss_theta(x, np.array([UNLABELED]), flow, prior)
    b, _ = loss_theta(x, np.array([0]), flow, prior)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_loss_theta_is_mean_of_rows(rng):
    flow = random_flow(5, rng)
    prior = lt.LatentPrior(rng.normal(size=(2, 5)), np.array([0.3, 0.7]))
    x = rng.normal(size=(6, 5))
    labels = np.array([0, 1, UNLABELED, 1, UNLABELED, 0])
    batch, parts = loss_theta(x, labels, flow, prior)
    rows = [loss_theta(x[[i]], labels[[i]], flow, prior)[0].item() for i in range(6)]
    assert batch.item() == pytest.approx(np.mean(rows), abs=1e-12)
    assert parts.theta_labeled + parts.theta_unlabeled == pytest.approx(parts.theta, abs=1e-12)


def test_loss_theta_identity_flow_is_gmm_nll(rng):
    flow = fl.init_flow(3, rng)
    prior = lt.LatentPrior(rng.normal(size=(2, 3)), np.array([0.4, 0.6]))
    x = rng.normal(size=(5, 3))
    loss, _ = loss_theta(x, np.full(5, UNLABELED), flow, prior)
    assert loss.item() == pytest.approx(-lt.log_marginal(x, prior).value.mean(), abs=1e-12)


def test_loss_theta_gradients(rng):
    flow = random_flow(4, rng, hidden=4)
    prior = lt.LatentPrior(rng.normal(size=(2, 4)), np.array([0.5, 0.5]))
    x = rng.normal(size=(3, 4))
    labels = np.array([0, UNLABELED, 1])

    def f(arrays, tape=None):
        p = flow.with_arrays(arrays)
        w = fl.bind(p, tape, trainable=True) if tape else None
        return loss_theta(tape.constant(x) if tape else x, labels, p, prior, w)[0], w

    arrays = flow.named_arrays()
    tape = Tape()
    out, w = f(arrays, tape)
    g = tape.backward(out)
    num = central_diff(lambda a: f(a)[0].item(), arrays, list(arrays))
    for k in arrays:
        assert_grad_close(g[w[k]], num[k])


# -- autoencoder loss -----------------------------------------------------------

def gamma_setup(rng):
    d, L = 3, 2
    flow = random_flow(d + L, rng, hidden=5)
    oda = od.init_oda(d + L, rng, hidden=12, identity=False, noise=0.4)
    prior = lt.LatentPrior(rng.normal(size=(L, d + L)), np.array([0.5, 0.5]))
    x_hat = np.concatenate([rng.uniform(size=(3, d)), one_hot(np.array([0, UNLABELED, 1]), L)], axis=1)
    mask = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    return d, flow, oda, prior, x_hat, mask


def test_loss_gamma_gradients_three_rows(rng):
    d, flow, oda, prior, x_hat, mask = gamma_setup(rng)
    labels = np.array([0, UNLABELED, 1])

    def f(arrays, tape=None):
        q = oda.with_arrays(arrays)
        w = od.bind(q, tape, trainable=True) if tape else None
        xh = tape.constant(x_hat) if tape else x_hat
        return loss_gamma(xh, x_hat[:, :d], mask, labels, flow, q, prior, oda_weights=w)[0], w

    arrays = oda.named_arrays()
    tape = Tape()
    out, w = f(arrays, tape)
    g = tape.backward(out)
    num = central_diff(lambda a: f(a)[0].item(), arrays, list(arrays))
    for k in arrays:
        assert_grad_close(g[w[k]], num[k])


def test_loss_gamma_perfect_reconstruction_has_zero_mse(rng):
    d = 2
    flow = random_flow(d + 2, rng)
    oda = od.init_oda(d + 2, rng, noise=0.0)
    prior = lt.LatentPrior(rng.normal(size=(2, d + 2)), np.array([0.5, 0.5]))
    x_hat = np.concatenate([rng.uniform(size=(4, d)), one_hot(np.array([0, 1, 0, 1]), 2)], axis=1)
    _, parts = loss_gamma(x_hat, x_hat[:, :d], np.ones((4, d)), np.array([0, 1, 0, 1]),
                          flow, oda, prior)
    assert parts.gamma_mse < 1e-20


def test_loss_gamma_unlabeled_rows_have_no_label_term(rng):
    d, flow, oda, prior, x_hat, mask = gamma_setup(rng)
    unl = np.full(3, UNLABELED)
    a, pa = loss_gamma(x_hat, x_hat[:, :d], mask, unl, flow, oda, prior)
    x2 = x_hat.copy()
    x2[:, d:] = 0.9  # different label block input does not add a label term
    _, pb = loss_gamma(x2, x_hat[:, :d], mask, unl, flow, oda, prior)
    assert pa.gamma_cee == 0.0 and pb.gamma_cee == 0.0
    assert a.item() == pytest.approx(pa.gamma_mse - (-pa.gamma_nll), abs=1e-12)


def test_loss_gamma_prior_labels_decouple_density_from_label_term(rng):
    d, flow, oda, prior, x_hat, mask = gamma_setup(rng)
    labels = np.array([0, UNLABELED, 1])
    unl = np.full(3, UNLABELED)
    _, mixed = loss_gamma(x_hat, x_hat[:, :d], mask, labels, flow, oda, prior, prior_labels=unl)
    _, cond = loss_gamma(x_hat, x_hat[:, :d], mask, labels, flow, oda, prior)
    _, none = loss_gamma(x_hat, x_hat[:, :d], mask, unl, flow, oda, prior)
    # label term follows labels, density term follows prior_labels
    assert mixed.gamma_cee == pytest.approx(cond.gamma_cee, abs=1e-15) and mixed.gamma_cee > 0
    assert mixed.gamma_nll == pytest.approx(none.gamma_nll, abs=1e-12)
    assert mixed.gamma_nll != pytest.approx(cond.gamma_nll, abs=1e-6)


def test_label_term_trains_without_conditional_latent():
    _, train_ds, _, _ = blob_data(n=60)
    res = train(train_ds, TrainConfig(enable_conditional_latent=False, **FAST))
    assert any(h["epoch_losses"][-1]["gamma_cee"] > 0 for h in res.history)


def test_loss_gamma_empty_batch(rng):
    d, flow, oda, prior, x_hat, mask = gamma_setup(rng)
    with pytest.raises(DimensionError):
        loss_gamma(x_hat[:0], x_hat[:0, :d], mask[:0], np.array([], dtype=int), flow, oda, prior)


# -- training -------------------------------------------------------------------

def test_zero_epochs_returns_blended_initialisation():
    ds, train_ds, _, _ = blob_data()
    res = train(train_ds, TrainConfig(n_iterations=1, n_epochs=0))
    x = res.state.x_dot
    np.testing.assert_array_equal(x[ds.M == 1], ds.X[ds.M == 1])
    miss = x[ds.M == 0]
    assert np.all((miss >= 0) & (miss <= 1)) and miss.std() > 0.1
    assert res.history[0]["epochs"] == 0


def test_training_is_deterministic():
    _, train_ds, _, _ = blob_data(n=60)
    a = train(train_ds, TrainConfig(seed=5, **FAST))
    b = train(train_ds, TrainConfig(seed=5, **FAST))
    assert a.state.x_dot.tobytes() == b.state.x_dot.tobytes()
    assert a.prior.means.tobytes() == b.prior.means.tobytes()
    c = train(train_ds, TrainConfig(seed=6, **FAST))
    assert c.state.x_dot.tobytes() != a.state.x_dot.tobytes()


def test_observed_values_and_labels_preserved_during_training():
    ds, train_ds, hidden, _ = blob_data(n=80)
    labeled = train_ds.y >= 0
    from sscflow import model as m

    trainer = m._Trainer(train_ds, TrainConfig(n_iterations=3, n_epochs=2, batch_size=16))
    for _ in range(3):
        trainer.step(np.arange(16))
        trainer.refresh()
        trainer.update_means()
        s = trainer.state
        np.testing.assert_array_equal(s.x_dot[ds.M == 1], ds.X[ds.M == 1])
        np.testing.assert_array_equal(s.y_dot[labeled], one_hot(train_ds.y[labeled], 2))
        assert np.all(np.isfinite(s.x_dot)) and np.all(np.isfinite(s.y_dot))
        assert np.all((s.y_dot[~labeled] >= 0) & (s.y_dot[~labeled] <= 1))


def test_supervised_degenerate_case_loss_decreases():
    ds, _, _, _ = blob_data(n=80, p=0.0, hide=0.0)
    assert np.all(ds.M == 1)
    cfg = TrainConfig(n_iterations=1, n_epochs=40, batch_size=80, enable_idm=False, lr=3e-3)
    hist = train(ds, cfg).history[0]["epoch_losses"]
    theta = [e["theta"] for e in hist]
    assert np.mean(theta[-5:]) < np.mean(theta[:5])


def test_class_without_labels_is_rejected():
    ds, _, _, _ = blob_data(n=40)
    with pytest.raises(ConfigurationError, match="without labelled rows"):
        train(ds.hide_labels(np.flatnonzero(ds.y == 1)), TrainConfig(**FAST))


def test_epoch_schedule():
    cfg = TrainConfig()
    assert [cfg.epochs_for(i) for i in range(10)] == [2 ** (i + 1) for i in range(10)]
    assert TrainConfig(max_epochs=16).epochs_for(9) == 16
    assert TrainConfig(n_epochs=3).epochs_for(5) == 3
    with pytest.raises(ConfigurationError):
        TrainConfig(n_iterations=0)


@pytest.mark.parametrize("flags", [(True, False, False), (False, True, False), (False, False, True),
                                   (True, True, True)])
def test_ablation_variants_train(flags):
    idm, it, ls = flags
    ds, train_ds, hidden, _ = blob_data(n=60)
    res = train(train_ds, TrainConfig(enable_idm=idm, enable_conditional_transform=it,
                                      enable_conditional_latent=ls, **FAST))
    assert res.state.y_dot.shape[1] == (2 if it else 0)
    assert res.prior.n_classes == (2 if ls else 1)
    assert res.oda.overcomplete == idm
    if not idm:
        miss = res.state.x_dot[ds.M == 0]
        assert miss.size
    pred = predict_batch(res.model, ds.X[hidden], ds.M[hidden])
    np.testing.assert_allclose(pred.posterior.sum(axis=1), 1.0, atol=1e-12)


# -- inference --------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    ds, train_ds, hidden, _ = blob_data(n=120, p=0.3)
    cfg = TrainConfig(n_iterations=4, n_epochs=8, batch_size=32, lr=3e-3, seed=1)
    return ds, train(train_ds, cfg), hidden


def test_fully_observed_record_is_unchanged(trained):
    ds, res, _ = trained
    x = np.array([0.3, 0.8])
    imputed, label, post = impute_and_classify(res.model, x, np.ones(2))
    np.testing.assert_array_equal(imputed, x)
    assert post.sum() == pytest.approx(1.0, abs=1e-12)
    assert label in (0, 1)


def test_labeled_rows_are_recovered(trained):
    ds, res, hidden = trained
    rows = np.setdiff1d(np.flatnonzero(ds.M.sum(axis=1) == 2), hidden)
    pred = predict_batch(res.model, ds.X[rows], ds.M[rows])
    assert np.mean(pred.labels == ds.y[rows]) > 0.95


def test_single_row_batch_equals_scalar_path(trained):
    ds, res, _ = trained
    i = int(np.flatnonzero(ds.M.sum(axis=1) == 1)[0])
    init = np.full((1, 2), 0.4)
    p = predict_batch(res.model, ds.X[[i]], ds.M[[i]], init=init)
    imputed, label, post = impute_and_classify(res.model, ds.X[i], ds.M[i], init=init)
    np.testing.assert_array_equal(p.imputed[0], imputed)
    np.testing.assert_array_equal(p.posterior[0], post)
    assert p.labels[0] == label


def test_batch_matches_row_loop_and_permutation(trained, rng):
    ds, res, _ = trained
    rows = rng.choice(ds.n, size=50, replace=False)
    init = rng.random((50, 2))
    p = predict_batch(res.model, ds.X[rows], ds.M[rows], init=init)
    for j, i in enumerate(rows):
        imputed, label, post = impute_and_classify(res.model, ds.X[i], ds.M[i], init=init[j])
        np.testing.assert_allclose(p.imputed[j], imputed, atol=1e-12)
        np.testing.assert_allclose(p.posterior[j], post, atol=1e-12)
        assert p.labels[j] == label
    perm = rng.permutation(50)
    q = predict_batch(res.model, ds.X[rows][perm], ds.M[rows][perm], init=init[perm])
    np.testing.assert_allclose(q.imputed, p.imputed[perm], atol=1e-12)
    np.testing.assert_array_equal(q.labels, p.labels[perm])


def test_inference_preserves_observed_cells(trained):
    ds, res, _ = trained
    p = predict_batch(res.model, ds.X, ds.M, seed=3)
    np.testing.assert_array_equal(p.imputed[ds.M == 1], ds.X[ds.M == 1])


def test_inference_schema_mismatch(trained):
    _, res, _ = trained
    with pytest.raises(DimensionError):
        predict_batch(res.model, np.zeros((2, 3)), np.ones((2, 3)))
