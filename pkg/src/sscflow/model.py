"""Training and inference for the semi-supervised conditional flow.

Training alternates, per mini-batch, one Adam step on the flow likelihood
loss and one on the autoencoder reconstruction loss.  After the epochs of an
iteration every row is pushed through ``T^-1(D(T(x)))``, the missing cells
(and hidden label cells) take the reconstructed values, and the class means
are re-centred on the labelled latents.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import flow as fl
from . import latent as lt
from . import oda as od
from .data import UNLABELED, IncompleteDataset
from .diffcore import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_iterations: int = 10
    # None -> 2, 4, 8, ... epochs for iterations 1, 2, 3, ...
    n_epochs: int | None = None
    max_epochs: int | None = None
    batch_size: int | None = None
    seed: int = 0
    enable_idm: bool = True
    enable_conditional_transform: bool = True
    enable_conditional_latent: bool = True
    lr: float = 1e-3
    # flow learning rate; None -> lr
    lr_flow: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_coupling: int = 4
    coupling_hidden: int | None = None
    oda_hidden: int | None = None
    mse_weight: float = 1.0
    density_weight: float = 1.0
    # fraction of labelled rows per batch whose label block is shown as 0.5
    label_mask_rate: float = 0.5
    # same, for the flow step; None -> label_mask_rate
    theta_label_mask_rate: float | None = None
    # fraction of observed feature cells replaced by uniform noise in the
    # autoencoder input (denoising target stays the observed value)
    corrupt_rate: float = 0.5
    # clamp refreshed imputations to the normalised feature range
    clip_imputations: bool = True
    # std of Gaussian dequantisation noise added to the flow-step input
    theta_noise: float = 0.2

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigurationError("n_iterations must be >= 1")
        if self.n_epochs is not None and self.n_epochs < 0:
            raise ConfigurationError("n_epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def epochs_for(self, iteration: int) -> int:
        """Epoch count for 0-based ``iteration``."""
        e = self.n_epochs if self.n_epochs is not None else 2 ** (iteration + 1)
        if self.max_epochs is not None:
            e = min(e, self.max_epochs)
        return e

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ImputationState:
    x_dot: np.ndarray            # (n, d) imputed features
    y_dot: np.ndarray            # (n, L) label block; (n, 0) without the conditional transform
    x_tilde: np.ndarray | None = None  # last reconstruction T^-1(D(T(x_hat)))

    def x_hat(self) -> np.ndarray:
        return np.concatenate([self.x_dot, self.y_dot], axis=1)


@dataclass
class LossBreakdown:
    theta_labeled: float = 0.0
    theta_unlabeled: float = 0.0
    theta: float = 0.0
    gamma_mse: float = 0.0
    gamma_cee: float = 0.0
    gamma_nll: float = 0.0
    gamma: float = 0.0

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))

    def scaled(self, c: float) -> "LossBreakdown":
        return LossBreakdown(*(c * a for a in asdict(self).values()))


@dataclass
class SSCFlowModel:
    flow: fl.FlowParams
    oda: od.OdaParams
    prior: lt.LatentPrior
    config: TrainConfig
    n_features: int
    n_classes: int
    # identity-covariance Gaussian classifier on imputed features; used when
    # neither the label block nor the class-conditional prior is enabled
    feature_prior: lt.LatentPrior | None = None

    @property
    def label_block(self) -> bool:
        return self.config.enable_conditional_transform


@dataclass
class TrainResult:
    model: SSCFlowModel
    state: ImputationState
    history: list[dict] = field(default_factory=list)

    @property
    def flow(self):
        return self.model.flow

    @property
    def oda(self):
        return self.model.oda

    @property
    def prior(self):
        return self.model.prior


@dataclass
class Prediction:
    imputed: np.ndarray    # (n, d)
    labels: np.ndarray     # (n,)
    posterior: np.ndarray  # (n, L), rows sum to 1
    latent: np.ndarray     # (n, D) reconstructed latent codes


# ---------------------------------------------------------------------------
# building blocks


def blend(x: np.ndarray, mask: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Observed cells from ``x``, missing cells from ``candidate``."""
    x, mask, candidate = (np.asarray(a, dtype=np.float64) for a in (x, mask, candidate))
    if not (x.shape == mask.shape == candidate.shape):
        raise DimensionError(f"blend shapes differ: {x.shape}, {mask.shape}, {candidate.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary")
    return np.where(mask == 1, x, candidate)


def one_hot(labels: np.ndarray, n_classes: int, fill: float = 0.5) -> np.ndarray:
    """One-hot rows for labelled entries, ``fill`` everywhere for unlabelled ones."""
    labels = np.asarray(labels)
    out = np.full((labels.size, n_classes), fill)
    lab = labels >= 0
    out[lab] = 0.0
    out[np.flatnonzero(lab), labels[lab]] = 1.0
    return out


def _log_density_matrix(z: Tensor, prior: lt.LatentPrior) -> Tensor:
    return dc.concat_cols(*(lt.log_density_class(z, k, prior) for k in range(prior.n_classes)))


def _row_log_prior(z: Tensor, labels: np.ndarray, prior: lt.LatentPrior):
    """Per-row latent log-density: class-conditional for labelled rows, mixture otherwise."""
    labels = np.asarray(labels)
    lab = (labels >= 0).astype(np.float64).reshape(-1, 1)
    ldm = _log_density_matrix(z, prior)
    sel = one_hot(np.where(labels >= 0, labels, UNLABELED), prior.n_classes, fill=0.0)
    labeled_part = dc.sum(dc.hadamard(ldm, sel), axis=1)
    log_pi = np.log(np.maximum(prior.priors, 1e-300)).reshape(1, -1)
    unlabeled_part = dc.logsumexp_rowwise(dc.add(ldm, log_pi))
    row = dc.add(dc.hadamard(labeled_part, lab), dc.hadamard(unlabeled_part, 1.0 - lab))
    return row, lab


def loss_theta(x_hat, labels, flow: fl.FlowParams, prior: lt.LatentPrior,
               weights=None) -> tuple[Tensor, LossBreakdown]:
    """Mean negative log-likelihood of the batch under the flow + latent prior.

    ``labels`` are class indices with -1 for unlabelled rows.
    """
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    n = x_hat.shape[0]
    if n == 0:
        raise DimensionError("empty batch")
    z, logdet = fl.forward(x_hat, flow, weights)
    lp, lab = _row_log_prior(z, labels, prior)
    nll = dc.scale(dc.add(lp, logdet), -1.0)
    loss = dc.mean(nll)
    per_row = nll.value.ravel()
    lab = lab.ravel().astype(bool)
    parts = LossBreakdown(theta_labeled=float(per_row[lab].sum() / n),
                          theta_unlabeled=float(per_row[~lab].sum() / n),
                          theta=loss.item())
    return loss, parts


def reconstruct_path(x_hat, flow: fl.FlowParams, oda: od.OdaParams,
                     flow_weights=None, oda_weights=None):
    """``T^-1(D(T(x_hat)))``; returns (x_tilde, z_hat, logdet of T at x_tilde)."""
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    z, _ = fl.forward(x_hat, flow, flow_weights)
    z_hat = od.reconstruct(z, oda, oda_weights)
    # T(x_tilde) == z_hat exactly in exact arithmetic, and the forward log-det
    # at x_tilde is the sum of the scale outputs met during the inverse pass
    x_tilde, logdet = fl.inverse(z_hat, flow, flow_weights, return_logdet=True)
    return x_tilde, z_hat, logdet


def loss_gamma(x_hat, x_obs, mask, labels, flow: fl.FlowParams, oda: od.OdaParams,
               prior: lt.LatentPrior, oda_weights=None, flow_weights=None,
               label_block: bool = True, mse_weight: float = 1.0,
               density_weight: float = 1.0, prior_labels=None) -> tuple[Tensor, LossBreakdown]:
    """Mean over rows of MSE(observed) + beta * CE(labels) - log p_X(x_tilde).

    ``prior_labels`` (default ``labels``) selects the latent density per row;
    pass all -1 to score every row under the mixture while keeping CE targets.
    """
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    n = x_hat.shape[0]
    if n == 0:
        raise DimensionError("empty batch")
    x_obs = np.asarray(x_obs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    labels = np.asarray(labels)
    d = x_obs.shape[1]
    x_tilde, z_hat, logdet = reconstruct_path(x_hat, flow, oda, flow_weights, oda_weights)

    feats = dc.split_cols(x_tilde, np.arange(d))
    resid = dc.hadamard(dc.sub(feats, x_obs * mask), mask)
    mse = dc.scale(dc.sum(dc.square(resid), axis=1), 1.0 / d)
    total = dc.scale(mse, mse_weight)
    cee = None
    beta = (labels >= 0).astype(np.float64).reshape(-1, 1)
    if label_block and beta.any():
        y_rec = dc.split_cols(x_tilde, np.arange(d, x_tilde.shape[1]))
        log_sm = dc.sub(y_rec, dc.logsumexp_rowwise(y_rec))
        target = one_hot(labels, y_rec.shape[1], fill=0.0)
        cee = dc.scale(dc.sum(dc.hadamard(log_sm, target), axis=1), -1.0)
        total = dc.add(total, dc.hadamard(cee, beta))
    lp, _ = _row_log_prior(z_hat, labels if prior_labels is None else prior_labels, prior)
    log_px = dc.add(lp, logdet)
    total = dc.sub(total, dc.scale(log_px, density_weight))
    loss = dc.mean(total)
    parts = LossBreakdown(
        gamma_mse=float(mse.value.mean()),
        gamma_cee=float((cee.value * beta).mean()) if cee is not None else 0.0,
        gamma_nll=float(-log_px.value.mean()),
        gamma=loss.item(),
    )
    return loss, parts


# ---------------------------------------------------------------------------
# training


def _check_dataset(ds: IncompleteDataset, config: TrainConfig) -> None:
    if ds.n == 0:
        raise ConfigurationError("empty dataset")
    if ds.n_classes < 1:
        raise ConfigurationError("no classes")
    present = np.unique(ds.y[ds.y >= 0])
    missing = sorted(set(range(ds.n_classes)) - set(present.tolist()))
    if missing:
        names = [ds.classes[k] for k in missing]
        raise ConfigurationError(f"classes without labelled rows: {names}")
    dim = ds.d + (ds.n_classes if config.enable_conditional_transform else 0)
    if dim < 2:
        raise ConfigurationError("the coupling flow needs at least two input coordinates")


def _fit_feature_prior(x: np.ndarray, labels: np.ndarray, n_classes: int) -> lt.LatentPrior:
    pri = lt.empirical_priors(labels, n_classes)
    means = np.zeros((n_classes, x.shape[1]))
    return lt.update_means(x, labels, lt.LatentPrior(means, pri))


class _Trainer:
    def __init__(self, ds: IncompleteDataset, config: TrainConfig):
        _check_dataset(ds, config)
        self.ds = ds
        self.cfg = config
        ss = np.random.SeedSequence(config.seed)
        init_ss, impute_ss, shuffle_ss, mask_ss = ss.spawn(4)
        self.mask_rng = np.random.default_rng(mask_ss)
        init_rng = np.random.default_rng(init_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.L = ds.n_classes
        self.d = ds.d
        self.labels = ds.y.copy()

        if config.enable_idm:
            start = np.random.default_rng(impute_ss).random(ds.X.shape)
        else:
            start = np.zeros(ds.X.shape)
        x_dot = blend(ds.X, ds.M, start)
        y_dot = (one_hot(self.labels, self.L) if config.enable_conditional_transform
                 else np.zeros((ds.n, 0)))
        self.state = ImputationState(x_dot, y_dot)
        dim = self.d + y_dot.shape[1]
        self.flow = fl.init_flow(dim, init_rng, n_layers=config.n_coupling,
                                 hidden=config.coupling_hidden)
        self.oda = od.init_oda(dim, init_rng, hidden=config.oda_hidden,
                               overcomplete=config.enable_idm)
        if config.enable_conditional_latent:
            self.prior = lt.LatentPrior.random(self.L, dim, lt.empirical_priors(self.labels, self.L),
                                               init_rng)
            self.loss_labels = self.labels
        else:
            self.prior = lt.LatentPrior.standard(dim)
            self.loss_labels = np.full(ds.n, UNLABELED)
        self.opt_theta = dc.AdamState(lr=config.lr if config.lr_flow is None else config.lr_flow, beta1=config.beta1, beta2=config.beta2,
                                      eps=config.eps)
        self.opt_gamma = dc.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                                      eps=config.eps)
        self.batch = config.batch_size or min(ds.n, 256)
        self.history: list[dict] = []

    def _mask_labels(self, x_hat: np.ndarray, rows: np.ndarray, rate: float) -> np.ndarray:
        """Show a random ``rate`` share of labelled rows with an unlabelled (0.5) block."""
        x_hat = x_hat.copy()
        if rate > 0 and self.state.y_dot.shape[1]:
            hide = (self.labels[rows] >= 0) & (self.mask_rng.random(rows.size) < rate)
            x_hat[hide, self.d:] = 0.5
        return x_hat

    def step(self, rows: np.ndarray) -> LossBreakdown:
        base = self.state.x_hat()[rows]
        labels = self.loss_labels[rows]
        theta_rate = self.cfg.label_mask_rate if self.cfg.theta_label_mask_rate is None \
            else self.cfg.theta_label_mask_rate
        x_theta = self._mask_labels(base, rows, theta_rate)
        x_hat = self._mask_labels(base, rows, self.cfg.label_mask_rate)
        if self.cfg.theta_noise > 0:
            x_theta = x_theta + self.cfg.theta_noise * self.mask_rng.standard_normal(x_theta.shape)

        tape = dc.Tape()
        w = fl.bind(self.flow, tape, trainable=True)
        loss, parts_t = loss_theta(tape.constant(x_theta), labels, self.flow, self.prior, w)
        grads = tape.backward(loss)
        new, self.opt_theta = dc.adam_step(self.flow.named_arrays(),
                                           {k: grads[v] for k, v in w.items()}, self.opt_theta)
        self.flow = self.flow.with_arrays(new)

        x_in = x_hat
        if self.cfg.corrupt_rate > 0:
            obs = self.ds.M[rows] == 1
            hit = obs & (self.mask_rng.random(obs.shape) < self.cfg.corrupt_rate)
            x_in = x_hat.copy()
            x_in[:, :self.d] = np.where(hit, self.mask_rng.random(obs.shape), x_hat[:, :self.d])

        tape = dc.Tape()
        wf = fl.bind(self.flow, tape, trainable=False)
        wo = od.bind(self.oda, tape, trainable=True)
        loss, parts_g = loss_gamma(tape.constant(x_in), self.ds.X[rows], self.ds.M[rows],
                                   self.labels[rows], self.flow, self.oda, self.prior,
                                   oda_weights=wo, flow_weights=wf, prior_labels=labels,
                                   label_block=self.cfg.enable_conditional_transform,
                                   mse_weight=self.cfg.mse_weight,
                                   density_weight=self.cfg.density_weight)
        grads = tape.backward(loss)
        new, self.opt_gamma = dc.adam_step(self.oda.named_arrays(),
                                           {k: grads[v] for k, v in wo.items()}, self.opt_gamma)
        self.oda = self.oda.with_arrays(new)
        return parts_t + parts_g

    def refresh(self) -> None:
        x_tilde, _, _ = reconstruct_path(self.state.x_hat(), self.flow, self.oda)
        xt = x_tilde.value
        cand = xt[:, :self.d]
        if self.cfg.clip_imputations:
            cand = np.clip(cand, 0.0, 1.0)
        x_dot = blend(self.ds.X, self.ds.M, cand)
        y_dot = self.state.y_dot.copy()
        if y_dot.shape[1]:
            hidden = self.labels < 0
            y_dot[hidden] = np.clip(xt[hidden, self.d:], 0.0, 1.0)
        self.state = ImputationState(x_dot, y_dot, xt)

    def update_means(self) -> None:
        if not self.cfg.enable_conditional_latent:
            return
        z, _ = fl.forward(self.state.x_hat(), self.flow)
        self.prior = lt.update_means(z.value, self.labels, self.prior)

    def run(self, callback: Callable[[dict], None] | None = None) -> TrainResult:
        n = self.ds.n
        for it in range(self.cfg.n_iterations):
            n_epochs = self.cfg.epochs_for(it)
            epoch_losses = []
            for _ in range(n_epochs):
                perm = self.shuffle_rng.permutation(n)
                acc = LossBreakdown()
                n_batches = 0
                for start in range(0, n, self.batch):
                    acc = acc + self.step(perm[start:start + self.batch])
                    n_batches += 1
                epoch_losses.append(acc.scaled(1.0 / n_batches))
            self.refresh()
            self.update_means()
            rec = {"iteration": it + 1, "epochs": n_epochs,
                   "epoch_losses": [asdict(e) for e in epoch_losses]}
            self.history.append(rec)
            if callback is not None:
                callback(rec)
            log.debug("iteration %d: %s", it + 1,
                      asdict(epoch_losses[-1]) if epoch_losses else "no epochs")
        feature_prior = None
        if not (self.cfg.enable_conditional_transform or self.cfg.enable_conditional_latent):
            feature_prior = _fit_feature_prior(self.state.x_dot, self.labels, self.L)
        model = SSCFlowModel(self.flow, self.oda, self.prior, self.cfg, self.d, self.L,
                             feature_prior)
        return TrainResult(model, self.state, self.history)


def train(ds: IncompleteDataset, config: TrainConfig | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit the flow, the autoencoder and the latent means on ``ds``.

    Rows with label -1 take part as unlabelled instances.
    """
    return _Trainer(ds, config or TrainConfig()).run(callback)


# ---------------------------------------------------------------------------
# inference


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def predict_batch(model: SSCFlowModel, X: np.ndarray, M: np.ndarray,
                  init: np.ndarray | None = None, seed=None) -> Prediction:
    """Impute and classify a batch of rows (features already normalised).

    Missing cells start from ``init`` when given (e.g. the training-time
    imputations), else from uniform noise drawn with ``seed``.  The label
    block starts at 0.5 everywhere.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if X.shape[1] != model.n_features or X.shape != M.shape:
        raise DimensionError(f"expected rows of {model.n_features} features, got {X.shape}/{M.shape}")
    n = X.shape[0]
    L = model.n_classes
    if init is None:
        rng = np.random.default_rng(model.config.seed if seed is None else seed)
        init = rng.random(X.shape) if model.config.enable_idm else np.zeros(X.shape)
    x_dot = blend(X, M, init)
    y_dot = np.full((n, L), 0.5) if model.label_block else np.zeros((n, 0))
    x_hat = np.concatenate([x_dot, y_dot], axis=1)
    x_tilde, z_hat, _ = reconstruct_path(x_hat, model.flow, model.oda)
    xt, zh = x_tilde.value, z_hat.value
    cand = xt[:, :model.n_features]
    if model.config.clip_imputations:
        cand = np.clip(cand, 0.0, 1.0)
    imputed = blend(X, M, cand)

    scores = []
    if model.config.enable_conditional_latent:
        scores.append(lt.posterior(zh, model.prior))
    if model.label_block:
        scores.append(_softmax(xt[:, model.n_features:]))
    if not scores:
        scores.append(lt.posterior(imputed, model.feature_prior))
    post = sum(scores) / len(scores)
    return Prediction(imputed, np.argmax(post, axis=1), post, zh)


def impute_and_classify(model: SSCFlowModel, x, mask, init=None, seed=None):
    """Single-record form of :func:`predict_batch`: (imputed, label, posterior)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mask = np.asarray(mask, dtype=np.float64).reshape(1, -1)
    if init is not None:
        init = np.asarray(init, dtype=np.float64).reshape(1, -1)
    p = predict_batch(model, x, mask, init=init, seed=seed)
    return p.imputed[0], int(p.labels[0]), p.posterior[0]


def latent_codes(model: SSCFlowModel, state: ImputationState) -> np.ndarray:
    z, _ = fl.forward(state.x_hat(), model.flow)
    return z.value
