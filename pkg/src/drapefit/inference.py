"""Material inference: deterministic fitting and a variational posterior.

Three model kinds share one pipeline (simulate -> render -> loss -> adjoint):
homogeneous fits a single 39-entry stiffness vector, heterogeneous fits one
per element, bayesian fits a diagonal Gaussian posterior (mean + raw scale,
78 scalars) by stochastic gradient descent on the negative evidence bound
with reparameterized samples.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import backward_simulate
from .dynamics import (GRAVITY_DEFAULT, K_HANDLE_DEFAULT, Simulator,
                       SolverError)
from .materials import (BEND_SHAPE, MaterialField, N_BEND, N_HOMOGENEOUS,
                        N_STRETCH, STRETCH_SHAPE, floor_bend, floor_stretch,
                        unflatten)
from .meshing import MeshTopology, RestState
from .metrics import kl_diag_gauss
from .render import CameraSpec, render_backward, render_silhouette

POSTERIOR_LAYOUT_VERSION = 1
PARAMETER_LAYOUT = "stretch-row-major-24,bend-row-major-15"

MODEL_KINDS = ("homogeneous", "heterogeneous", "bayesian")


class InferenceError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def inv_softplus(y):
    """Raw value whose softplus is y (y > 0)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise InferenceError("softplus output must be positive")
    return np.log(np.expm1(y))


@dataclass(frozen=True)
class PriorSpec:
    """Fixed diagonal Gaussian prior over the 39 stiffness parameters."""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != (N_HOMOGENEOUS,) or std.shape != (N_HOMOGENEOUS,):
            raise InferenceError(
                f"prior vectors must have length {N_HOMOGENEOUS}")
        if not np.all(std > 0):
            raise InferenceError("prior stds must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def default(cls, stretch_mean: float = 50.0, coupling_mean: float = 0.3,
                bend_mean: float = 1e-4, rel_std: float = 0.5) -> "PriorSpec":
        """Group prior: N/m-scale stretch entries, unitless coupling column,
        N m-scale bend entries, isotropic std as a fraction of the mean."""
        c = np.tile([stretch_mean, coupling_mean, stretch_mean, stretch_mean],
                    (STRETCH_SHAPE[0], 1))
        b = np.full(BEND_SHAPE, bend_mean)
        mean = np.concatenate([c.ravel(), b.ravel()])
        return cls(mean=mean, std=rel_std * mean)


@dataclass(frozen=True)
class LikelihoodSpec:
    """Fixed pixel-noise variance of the image observation model."""
    sigma_sq: float = 0.01

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise InferenceError("sigma_sq must be positive")


@dataclass(frozen=True)
class VariationalPosterior:
    """Diagonal Gaussian over the 39 stiffness parameters.

    mu is the mean; eta is the raw scale, std = softplus(eta), so the std
    stays positive for any real eta. 78 learnable scalars total.
    """
    mu: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        eta = np.asarray(self.eta, dtype=np.float64).ravel()
        if mu.shape != (N_HOMOGENEOUS,) or eta.shape != (N_HOMOGENEOUS,):
            raise InferenceError(
                f"posterior vectors must have length {N_HOMOGENEOUS}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "eta", eta)

    @property
    def std(self) -> np.ndarray:
        return softplus(self.eta)

    @property
    def n_parameters(self) -> int:
        return self.mu.size + self.eta.size

    @classmethod
    def from_prior(cls, prior: PriorSpec,
                   scale_fraction: float = 0.01) -> "VariationalPosterior":
        """Mean at the prior mean, std at a small fraction of |mean|."""
        init_std = np.maximum(scale_fraction * np.abs(prior.mean), 1e-12)
        return cls(mu=prior.mean.copy(), eta=inv_softplus(init_std))


def reparam_sample(theta: VariationalPosterior, eps) -> np.ndarray:
    """tau = mu + softplus(eta) * eps; deterministic given the noise."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != theta.mu.shape:
        raise InferenceError("noise vector shape mismatch")
    return theta.mu + theta.std * eps


def _gaussian_logpdf(x, mean, std) -> float:
    z = (x - mean) / std
    return float(-0.5 * np.sum(z * z) - np.sum(np.log(std))
                 - 0.5 * x.size * np.log(2.0 * np.pi))


def log_q(tau, theta: VariationalPosterior) -> float:
    return _gaussian_logpdf(np.asarray(tau, dtype=np.float64),
                            theta.mu, theta.std)


def log_prior(tau, prior: PriorSpec) -> float:
    return _gaussian_logpdf(np.asarray(tau, dtype=np.float64),
                            prior.mean, prior.std)


def posterior_prior_kl(theta: VariationalPosterior, prior: PriorSpec) -> float:
    """Closed-form KL(q || prior)."""
    return kl_diag_gauss(theta.mu, theta.std, prior.mean, prior.std)


# -- data terms --------------------------------------------------------------

def nll_image(predicted, observed, sigma_sq: float) -> float:
    """Negative Gaussian log likelihood of an observed image, summed over
    pixels: npix/2 ln(2 pi sigma^2) + sum(residual^2) / (2 sigma^2)."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(observed, dtype=np.float64)
    if a.shape != b.shape:
        raise InferenceError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not sigma_sq > 0:
        raise InferenceError("sigma_sq must be positive")
    const = 0.5 * a.size * np.log(2.0 * np.pi * sigma_sq)
    return float(const + np.sum((a - b) ** 2) / (2.0 * sigma_sq))


def nll_mesh(predicted_x, observed_x) -> float:
    """Mean squared vertex-position error between two same-topology meshes."""
    a = np.asarray(predicted_x, dtype=np.float64)
    b = np.asarray(observed_x, dtype=np.float64)
    if a.shape != b.shape:
        raise InferenceError(f"mesh shapes differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2) / len(a))


@dataclass(frozen=True)
class TrainData:
    """Observations of one drape: silhouette images and/or vertex meshes."""
    silhouettes: tuple = ()
    meshes: tuple = ()

    def __post_init__(self):
        sils = tuple(np.asarray(s, dtype=np.float64) for s in self.silhouettes)
        meshes = tuple(np.asarray(m, dtype=np.float64) for m in self.meshes)
        if not sils and not meshes:
            raise InferenceError("need at least one observation")
        for s in sils:
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise InferenceError("silhouettes must be square 2-D arrays")
        for m in meshes:
            if m.ndim != 2 or m.shape[1] != 3:
                raise InferenceError("meshes must be (V, 3) arrays")
        object.__setattr__(self, "silhouettes", sils)
        object.__setattr__(self, "meshes", meshes)


@dataclass(frozen=True)
class TrainConfig:
    n_steps: int
    h: float
    epochs: int
    seed: int = 0
    mc_samples: int = 4
    likelihood: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    data_weight: float = 1.0
    base_lr: float = 1e-2
    eta_lr: float = 1.0
    lr_decay: float = 0.995
    camera: CameraSpec = field(default_factory=CameraSpec)
    sharpness: float = 1.0
    k_handle: float = K_HANDLE_DEFAULT
    gravity: tuple = GRAVITY_DEFAULT
    damping: float = 0.0
    init_scale_fraction: float = 0.01

    def __post_init__(self):
        if self.n_steps < 1 or self.epochs < 1 or self.mc_samples < 1:
            raise InferenceError("n_steps, epochs, mc_samples must be >= 1")
        if self.h <= 0 or self.base_lr <= 0 or self.eta_lr <= 0:
            raise InferenceError("h and learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InferenceError("lr_decay must be in (0, 1]")
        if self.data_weight < 0:
            raise InferenceError("data_weight must be nonnegative")


def _forward_backward(topology: MeshTopology, rest: RestState,
                      material: MaterialField, config: TrainConfig,
                      data: TrainData, mode: str):
    """One pipeline pass: simulate, render, data loss, adjoint.

    mode 'mse' averages image/mesh MSE terms (deterministic training);
    mode 'nll' sums Gaussian negative log likelihoods (variational data
    term). Returns (loss, gradient w.r.t. the flat material vector).
    """
    sim = Simulator(topology, rest, material, config.h,
                    k_handle=config.k_handle, gravity=config.gravity,
                    damping=config.damping)
    state, tape = sim.simulate(sim.initial_state(), config.n_steps,
                               record_tape=True)
    loss = 0.0
    gx = np.zeros_like(state.x)

    if data.silhouettes:
        image = render_silhouette(state.x, topology.faces, config.camera,
                                  config.sharpness)
        pred = image.pixels
        n_obs = len(data.silhouettes)
        g_img = np.zeros_like(pred)
        for obs in data.silhouettes:
            if obs.shape != pred.shape:
                raise InferenceError("observed silhouette resolution differs "
                                     "from the camera setting")
            if mode == "mse":
                loss += np.mean((pred - obs) ** 2) / n_obs
                g_img += 2.0 * (pred - obs) / (pred.size * n_obs)
            else:
                loss += nll_image(pred, obs, config.likelihood.sigma_sq)
                g_img += (pred - obs) / config.likelihood.sigma_sq
        gx += render_backward(state.x, topology.faces, config.camera, g_img,
                              config.sharpness)

    for obs in data.meshes:
        scale = 1.0 / len(data.meshes) if mode == "mse" else 1.0
        loss += scale * nll_mesh(state.x, obs)
        gx += scale * 2.0 * (state.x - obs) / len(state.x)

    bundle = backward_simulate(sim, tape, gx)
    return float(loss), bundle.material_flat()


def elbo_loss(theta: VariationalPosterior, prior: PriorSpec,
              topology: MeshTopology, rest: RestState, data: TrainData,
              config: TrainConfig, rng=None, eps=None):
    """Monte Carlo negative evidence bound and its exact gradient.

    loss = mean_i [log q(tau_i) - data_weight * log p(D | tau_i)
                   - log p(tau_i)] with tau_i = mu + softplus(eta) * eps_i.
    The gradient is the total derivative at fixed noise: the tau path plus
    the direct dependence of log q on (mu, eta). Returns
    (loss, d/dmu, d/deta, info dict with data_term/kl_term).
    """
    if eps is None:
        eps = np.random.default_rng(rng).standard_normal(
            (config.mc_samples, N_HOMOGENEOUS))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != N_HOMOGENEOUS:
        raise InferenceError("eps must be (m, 39)")
    m = len(eps)
    s = theta.std
    sig = sigmoid(theta.eta)
    w = config.data_weight

    loss_sum = 0.0
    data_sum = 0.0
    kl_sum = 0.0
    gmu = np.zeros(N_HOMOGENEOUS)
    geta = np.zeros(N_HOMOGENEOUS)
    for i in range(m):
        tau = reparam_sample(theta, eps[i])
        d = tau - theta.mu
        lq = log_q(tau, theta)
        lp = log_prior(tau, prior)
        dl_dtau = -d / s ** 2 + (tau - prior.mean) / prior.std ** 2
        data_term = 0.0
        if w > 0:
            try:
                data_nll, gmat = _forward_backward(
                    topology, rest, unflatten(tau), config, data, "nll")
            except SolverError as exc:
                raise TrainingError(f"sample {i}: {exc}") from exc
            data_term = w * data_nll
            dl_dtau = dl_dtau + w * gmat
        loss_sum += lq - lp + data_term
        data_sum += data_term
        kl_sum += lq - lp
        gmu += dl_dtau + d / s ** 2
        geta += dl_dtau * eps[i] * sig + (d * d / s ** 3 - 1.0 / s) * sig

    info = {"data_term": data_sum / m, "kl_term": kl_sum / m}
    return loss_sum / m, gmu / m, geta / m, info


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent with a per-parameter step size."""

    def __init__(self, lr, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray,
             scale: float = 1.0) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - scale * self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    kind: str
    params: np.ndarray        # best-loss flat parameters ((mu, eta) concat
    final_params: np.ndarray  # for bayesian); final_params is post last step
    best_epoch: int
    best_loss: float
    log: list
    face_count: int
    hinge_count: int

    @property
    def material(self) -> MaterialField:
        if self.kind == "bayesian":
            raise InferenceError("bayesian result holds a posterior, "
                                 "use .posterior or sample_material")
        if self.kind == "homogeneous":
            return unflatten(self.params)
        return unflatten(self.params, self.face_count, self.hinge_count)

    @property
    def posterior(self) -> VariationalPosterior:
        if self.kind != "bayesian":
            raise InferenceError("deterministic result has no posterior")
        return VariationalPosterior(mu=self.params[:N_HOMOGENEOUS],
                                    eta=self.params[N_HOMOGENEOUS:])


def _tile_flat(vec39: np.ndarray, face_count: int, hinge_count: int):
    return np.concatenate([np.tile(vec39[:N_STRETCH], face_count),
                           np.tile(vec39[N_STRETCH:], hinge_count)])


def train(model_kind: str, topology: MeshTopology, rest: RestState,
          data: TrainData, config: TrainConfig,
          prior: PriorSpec | None = None,
          init_material: MaterialField | None = None) -> TrainResult:
    """Fit material parameters (or their posterior) to drape observations.

    Each epoch evaluates the loss and its gradient at the current
    parameters, logs (epoch, loss, data_term, kl_term, grad_norm, seconds),
    then takes one optimizer step with per-group step sizes scaled by the
    prior stds. The best-loss parameters are retained.
    """
    if model_kind not in MODEL_KINDS:
        raise InferenceError(f"unknown model kind {model_kind!r}")
    if prior is None:
        prior = PriorSpec.default()
    fc, hc = topology.face_count, topology.hinge_count

    init_vec = prior.mean.copy()
    if init_material is not None:
        if init_material.kind != "homogeneous":
            raise InferenceError("init material must be homogeneous")
        init_vec = np.concatenate([init_material.stretch.ravel(),
                                   init_material.bend.ravel()])

    if model_kind == "homogeneous":
        params = init_vec
        lr = config.base_lr * prior.std
    elif model_kind == "heterogeneous":
        params = _tile_flat(init_vec, fc, hc)
        lr = config.base_lr * _tile_flat(prior.std, fc, hc)
    else:
        theta = VariationalPosterior.from_prior(
            PriorSpec(mean=init_vec, std=prior.std),
            config.init_scale_fraction)
        params = np.concatenate([theta.mu, theta.eta])
        lr = np.concatenate([config.base_lr * prior.std,
                             np.full(N_HOMOGENEOUS, config.eta_lr)])

    opt = Adam(lr)
    epoch_entropy = np.random.SeedSequence(config.seed).spawn(config.epochs)
    best_loss = np.inf
    best_epoch = 0
    best_params = params.copy()
    log = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if model_kind == "bayesian":
            theta = VariationalPosterior(mu=params[:N_HOMOGENEOUS],
                                         eta=params[N_HOMOGENEOUS:])
            try:
                loss, gmu, geta, info = elbo_loss(
                    theta, prior, topology, rest, data, config,
                    rng=epoch_entropy[epoch])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            grad = np.concatenate([gmu, geta])
            data_term, kl_term = info["data_term"], info["kl_term"]
        else:
            if config.data_weight > 0:
                if model_kind == "homogeneous":
                    mat = unflatten(params)
                else:
                    mat = unflatten(params, fc, hc)
                try:
                    raw, gmat = _forward_backward(topology, rest, mat,
                                                  config, data, "mse")
                except SolverError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
                loss = config.data_weight * raw
                grad = config.data_weight * gmat
            else:
                loss, grad = 0.0, np.zeros_like(params)
            data_term, kl_term = loss, 0.0

        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        gnorm = float(np.linalg.norm(grad))
        log.append({"epoch": epoch, "loss": float(loss),
                    "data_term": float(data_term),
                    "kl_term": float(kl_term), "grad_norm": gnorm,
                    "seconds": time.perf_counter() - t0})
        if loss < best_loss:
            best_loss = float(loss)
            best_epoch = epoch
            best_params = params.copy()
        params = opt.step(params, grad, scale=config.lr_decay ** epoch)

    return TrainResult(kind=model_kind, params=best_params,
                       final_params=params, best_epoch=best_epoch,
                       best_loss=best_loss, log=log, face_count=fc,
                       hinge_count=hc)


def sample_material(theta: VariationalPosterior, face_count: int,
                    hinge_count: int, rng=None) -> MaterialField:
    """Independent per-element posterior draw, floored to physical ranges."""
    gen = np.random.default_rng(rng)
    mu_s = theta.mu[:N_STRETCH]
    mu_b = theta.mu[N_STRETCH:]
    s = theta.std
    eps_f = gen.standard_normal((face_count, N_STRETCH))
    eps_h = gen.standard_normal((hinge_count, N_BEND))
    stretch = (mu_s + s[:N_STRETCH] * eps_f).reshape(
        (face_count,) + STRETCH_SHAPE)
    bend = (mu_b + s[N_STRETCH:] * eps_h).reshape(
        (hinge_count,) + BEND_SHAPE)
    return MaterialField(stretch=floor_stretch(stretch),
                         bend=floor_bend(bend))


# -- persistence -------------------------------------------------------------

def save_posterior(path, theta: VariationalPosterior) -> None:
    payload = {"layout_version": POSTERIOR_LAYOUT_VERSION,
               "parameter_layout": PARAMETER_LAYOUT,
               "mu": theta.mu.tolist(), "eta": theta.eta.tolist()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_posterior(path) -> VariationalPosterior:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("layout_version") != POSTERIOR_LAYOUT_VERSION:
        raise InferenceError("unsupported posterior layout version")
    return VariationalPosterior(mu=np.array(payload["mu"], dtype=np.float64),
                                eta=np.array(payload["eta"],
                                             dtype=np.float64))


def save_training_log(path, log) -> None:
    """One JSON object per epoch (JSONL)."""
    with open(path, "w") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")


def load_training_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
