"""Adversarial training with kernel-based critics.

Three objectives share one loop:

* ``ckipm`` -- the discriminator maps data back to the latent space and the
  critic is ``k(z, D(x))``; D minimizes ``k(z, D(G(z))) - k(z, D(x))`` plus a
  gradient penalty, G minimizes ``-k(z, D(G(z)))``.
* ``mmd2`` -- squared MMD between ``D(x)`` and ``D(G(z))`` under the kernel.
* ``wgan_gp`` -- scalar critic with the usual unit-gradient penalty.

With a learned kernel mixture, the logits get an RMSProp step after every
discriminator step (on L_D) and after the generator step (on L_G).
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import data as datasets
from . import kernels as K
from . import metrics as M
from . import nets
from .autodiff import Node, Tape

LOSS_KINDS = ("ckipm", "mmd2", "wgan_gp")
GP_TARGETS = ("witness", "jacobian_fro")
STREAM_LABELS = {"data": 0, "init": 1, "noise": 2, "gp": 3, "batch": 4, "eval": 5}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "ckipm"
    lambda_gp: float = 10.0
    lr: float = 1e-4
    n_d: int = 5
    batch_size: int | None = None          # None trains on the whole training set
    iterations: int = 10_000
    gp_target: str = "witness"
    eval_every: int = 500
    seed: int = 0
    kernel: str = "gaussian"
    kernel_mode: str = "soft"
    gaussian_sigma: float = 10.0
    laplacian_sigma: float = 100.0
    rbf_sigmas: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    exponential_sigma: float = 10.0
    matern_alpha: float = 1.0
    matern_length: float = 10.0
    architecture: str = "main"
    dataset: str = "ring"
    n_train: int = 2500
    noise_dim: int = 2
    eval_samples: int = 2500
    mmd_estimator: str = "biased"
    bn_eps: float = nets.BN_EPS
    bn_momentum: float = nets.BN_MOMENTUM
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    smile_eye_var: float = 0.001
    smile_arc_jitter: float = 0.01
    smile_center: tuple[float, float] = (0.0, -0.3)
    smile_weights: tuple[float, float, float] = (0.25, 0.25, 0.5)
    log_wall_time: bool = True

    def __post_init__(self):
        self.rbf_sigmas = tuple(float(s) for s in self.rbf_sigmas)
        self.smile_center = tuple(float(c) for c in self.smile_center)
        self.smile_weights = tuple(float(w) for w in self.smile_weights)

    def validate(self) -> "TrainConfig":
        problems = []
        if self.loss_kind not in LOSS_KINDS:
            problems.append(f"loss_kind must be one of {LOSS_KINDS}")
        if self.gp_target not in GP_TARGETS:
            problems.append(f"gp_target must be one of {GP_TARGETS}")
        if not self.lambda_gp >= 0:
            problems.append("lambda_gp must be >= 0")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.n_d < 1:
            problems.append("n_d must be >= 1")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if self.n_train < 2:
            problems.append("n_train must be >= 2")
        if self.batch_size is not None and not 2 <= self.batch_size <= self.n_train:
            problems.append("batch_size must lie in [2, n_train] (or be null for full batch)")
        if self.eval_samples < 1:
            problems.append("eval_samples must be >= 1")
        if self.dataset not in datasets.DATASETS:
            problems.append(f"dataset must be one of {datasets.DATASETS}")
        if self.architecture not in nets.ARCHITECTURES:
            problems.append(f"architecture must be one of {sorted(nets.ARCHITECTURES)}")
        if self.kernel not in K.KERNEL_NAMES + ("mix",):
            problems.append(f"kernel must be one of {K.KERNEL_NAMES + ('mix',)}")
        if self.kernel_mode not in K.MODES:
            problems.append(f"kernel_mode must be one of {K.MODES}")
        if self.mmd_estimator not in ("biased", "unbiased"):
            problems.append("mmd_estimator must be 'biased' or 'unbiased'")
        if self.noise_dim < 1:
            problems.append("noise_dim must be >= 1")
        try:
            self.make_kernel()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def make_kernel(self) -> K.Kernel:
        return K.make_kernel(
            self.kernel, gaussian_sigma=self.gaussian_sigma, laplacian_sigma=self.laplacian_sigma,
            rbf_sigmas=self.rbf_sigmas, exponential_sigma=self.exponential_sigma,
            matern_alpha=self.matern_alpha, matern_length=self.matern_length, mode=self.kernel_mode)

    def smile(self) -> datasets.SmileConfig:
        arc = datasets.Arc(center=self.smile_center, jitter=self.smile_arc_jitter)
        return datasets.SmileConfig(eye_var=self.smile_eye_var, arc=arc, weights=self.smile_weights)

    def mixture(self) -> datasets.MixtureSpec:
        return datasets.mixture(self.dataset, self.smile())

    @property
    def critic_dim(self) -> int:
        return 1 if self.loss_kind == "wgan_gp" else self.noise_dim


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose under one master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(STREAM_LABELS[label], *extra))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class TrainState:
    config: TrainConfig
    g_spec: nets.MLPSpec
    d_spec: nets.MLPSpec
    G: nets.ModelParams
    D: nets.ModelParams
    kernel: K.Kernel
    opt_g: nets.RMSProp
    opt_d: nets.RMSProp
    opt_xi: nets.RMSProp
    train_set: np.ndarray
    rngs: dict[str, np.random.Generator]
    iteration: int = 0
    xi_updates: int = 0
    last_loss_d: float = float("nan")
    last_loss_g: float = float("nan")
    elapsed: float = 0.0

    @property
    def logits(self) -> np.ndarray | None:
        return self.kernel.logits if isinstance(self.kernel, K.KernelMix) else None

    def xi(self) -> np.ndarray:
        if isinstance(self.kernel, K.KernelMix):
            return self.kernel.weights()
        return np.full(6, np.nan)


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    g_spec, d_spec = nets.architecture(config.architecture, config.noise_dim, 2, config.critic_dim)
    init_rng = stream(config.seed, "init")
    G = nets.init_params(g_spec, init_rng)
    D = nets.init_params(d_spec, init_rng)
    train_set = datasets.sample(config.dataset, config.n_train, stream(config.seed, "data"), config.smile())
    opt = lambda: nets.RMSProp(config.lr, config.rmsprop_decay, config.rmsprop_eps)  # noqa: E731
    rngs = {k: stream(config.seed, k) for k in ("noise", "gp", "batch")}
    return TrainState(config, g_spec, d_spec, G, D, config.make_kernel(), opt(), opt(), opt(), train_set, rngs)


# --------------------------------------------------------------------------
# graph construction


@dataclass
class Bound:
    """Parameters of one step placed on a fresh tape."""

    tape: Tape
    g: dict[str, Node]
    d: dict[str, Node]
    xi: Node | None


def bind(state: TrainState, train: str) -> Bound:
    """Bind G and D weights; ``train`` ('d' or 'g') selects which are variables."""
    tape = Tape()
    g = nets.bind(tape, state.G, "G", trainable=train == "g")
    d = nets.bind(tape, state.D, "D", trainable=train == "d")
    xi = tape.variable(state.logits, "xi") if state.logits is not None else None
    return Bound(tape, g, d, xi)


def _fwd(state: TrainState, which: str, weights, x: Node) -> Node:
    cfg = state.config
    spec, params = (state.g_spec, state.G) if which == "G" else (state.d_spec, state.D)
    return nets.forward(spec, weights, params, x, "train", bn_eps=cfg.bn_eps, momentum=cfg.bn_momentum)


def generate(state: TrainState, b: Bound, z: Node) -> Node:
    return _fwd(state, "G", b.g, z)


def discriminate(state: TrainState, b: Bound, x: Node) -> Node:
    return _fwd(state, "D", b.d, x)


def kernel_rows(state: TrainState, b: Bound, x, y) -> Node:
    return K.evaluate(state.kernel, x, y, b.xi)


def mmd2(X: Node, Y: Node, kernel: K.Kernel, logits: Node | None = None, unbiased: bool = False) -> Node:
    """Squared MMD estimate between point sets; the biased V-statistic by default."""
    kxx = K.gram(kernel, X, X, logits)
    kxy = K.gram(kernel, X, Y, logits)
    kyy = K.gram(kernel, Y, Y, logits)
    if not unbiased:
        return ad.mean(kxx) - ad.mean(kxy) * 2.0 + ad.mean(kyy)
    n, p = X.shape[0], Y.shape[0]
    if n < 2 or p < 2:
        raise ValueError("the unbiased estimator needs at least two points per set")
    off_x = 1.0 - np.eye(n)
    off_y = 1.0 - np.eye(p)
    return (ad.sum_(kxx * off_x) * (1.0 / (n * (n - 1))) - ad.mean(kxy) * 2.0
            + ad.sum_(kyy * off_y) * (1.0 / (p * (p - 1))))


def mmd2_biased(X, Y, kernel: K.Kernel, logits: Node | None = None) -> Node:
    X, Y = K._lift(X, Y)
    if X.shape[-1] != Y.shape[-1]:
        raise ad.ShapeError(f"point sets differ in dimension: {X.shape} vs {Y.shape}")
    return mmd2(X, Y, kernel, logits)


def interpolate(x: np.ndarray, g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-row uniform mixing ``u * x + (1 - u) * g``."""
    u = rng.uniform(0.0, 1.0, size=(len(x), 1))
    return u * x + (1.0 - u) * g


def _row_sqnorm(g: Node) -> Node:
    return ad.sum_(ad.square(g), axis=1)


def gradient_penalty(state: TrainState, b: Bound, x: Node, g: Node, z: Node | None,
                     xhat: np.ndarray | None = None) -> Node:
    """Penalty on the critic's input gradient at real/fake interpolates.

    ``witness`` penalizes ``||d/dx k(z_i, D(x))||^2`` at ``x = xhat_i`` (for
    ``mmd2`` the critic is the empirical MMD witness instead); ``jacobian_fro``
    penalizes the squared Frobenius norm of D's Jacobian. The result stays on
    the tape so it can be differentiated with respect to D's weights.
    """
    cfg = state.config
    if xhat is None:
        xhat = interpolate(x.value, g.value, state.rngs["gp"])
    xh = b.tape.constant(xhat, "xhat")
    dx = discriminate(state, b, xh)
    if cfg.loss_kind == "wgan_gp":
        grad = ad.gradient_as_nodes(ad.sum_(dx), [xh])["xhat"]
        norm = ad.sqrt(_row_sqnorm(grad) + ad.L2_EPS)
        return ad.mean(ad.square(norm - 1.0))
    if cfg.gp_target == "jacobian_fro":
        total = None
        for c in range(dx.shape[1]):
            grad = ad.gradient_as_nodes(ad.sum_(dx[:, c]), [xh])["xhat"]
            term = _row_sqnorm(grad)
            total = term if total is None else total + term
        return ad.mean(total)
    if cfg.loss_kind == "mmd2":
        d_real = discriminate(state, b, x)
        d_fake = discriminate(state, b, g)
        witness = (ad.mean(K.gram(state.kernel, dx, d_real, b.xi), axis=1)
                   - ad.mean(K.gram(state.kernel, dx, d_fake, b.xi), axis=1))
        critic = ad.sum_(witness)
    else:
        critic = ad.sum_(kernel_rows(state, b, z, dx))
    grad = ad.gradient_as_nodes(critic, [xh])["xhat"]
    return ad.mean(_row_sqnorm(grad))


def ckipm_discriminator_loss(state: TrainState, b: Bound, x: Node, z: Node,
                             xhat: np.ndarray | None = None) -> tuple[Node, dict[str, float]]:
    """Batch mean of ``k(z, D(G(z))) - k(z, D(x))`` plus the weighted penalty.

    Rows of ``z`` and ``x`` are paired positionally.
    """
    fake = generate(state, b, z)
    k_fake = kernel_rows(state, b, z, discriminate(state, b, fake))
    k_real = kernel_rows(state, b, z, discriminate(state, b, x))
    gap = ad.mean(k_fake - k_real)
    gp = gradient_penalty(state, b, x, fake, z, xhat)
    loss = gap + gp * state.config.lambda_gp
    return loss, {"kernel_gap": float(gap.value), "gradient_penalty": float(gp.value)}


def ckipm_generator_loss(state: TrainState, b: Bound, z: Node) -> tuple[Node, dict[str, float]]:
    fake = generate(state, b, z)
    loss = -ad.mean(kernel_rows(state, b, z, discriminate(state, b, fake)))
    return loss, {"reconstruction": float(loss.value)}


def mmd_baseline_losses(state: TrainState, b: Bound, x: Node, z: Node, with_penalty: bool = True,
                        xhat: np.ndarray | None = None) -> tuple[Node, Node, dict[str, float]]:
    """(L_D, L_G): D maximizes MMD^2 of its embeddings, G minimizes it."""
    fake = generate(state, b, z)
    mmd = mmd2(discriminate(state, b, x), discriminate(state, b, fake), state.kernel, b.xi,
               unbiased=state.config.mmd_estimator == "unbiased")
    loss_d = -mmd
    parts = {"mmd2": float(mmd.value)}
    if with_penalty:
        gp = gradient_penalty(state, b, x, fake, z, xhat)
        loss_d = loss_d + gp * state.config.lambda_gp
        parts["gradient_penalty"] = float(gp.value)
    return loss_d, mmd, parts


def wgan_gp_losses(state: TrainState, b: Bound, x: Node, z: Node, with_penalty: bool = True,
                   xhat: np.ndarray | None = None) -> tuple[Node, Node, dict[str, float]]:
    fake = generate(state, b, z)
    d_fake = ad.mean(discriminate(state, b, fake))
    d_real = ad.mean(discriminate(state, b, x))
    loss_d = d_fake - d_real
    parts = {"critic_gap": float(loss_d.value)}
    if with_penalty:
        gp = gradient_penalty(state, b, x, fake, z, xhat)
        loss_d = loss_d + gp * state.config.lambda_gp
        parts["gradient_penalty"] = float(gp.value)
    return loss_d, -d_fake, parts


# --------------------------------------------------------------------------
# training loop


def _real_batch(state: TrainState) -> np.ndarray:
    cfg = state.config
    if cfg.batch_size is None:
        return state.train_set
    idx = state.rngs["batch"].choice(len(state.train_set), size=cfg.batch_size, replace=False)
    return state.train_set[idx]


def _noise(state: TrainState, n: int) -> np.ndarray:
    return datasets.make_noise(n, state.config.noise_dim, state.rngs["noise"])


def _guard(fn: Callable, state: TrainState, phase: str):
    try:
        return fn()
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"iteration {state.iteration + 1}, {phase}: {exc}") from None


def _check_loss(value: float, parts: dict[str, float], state: TrainState, phase: str) -> None:
    if np.isfinite(value):
        return
    bad = [k for k, v in parts.items() if not np.isfinite(v)] or ["total"]
    raise TrainingDiverged(f"iteration {state.iteration + 1}, {phase}: non-finite {', '.join(bad)}")


def discriminator_step(state: TrainState) -> float:
    cfg = state.config
    x_np = _real_batch(state)
    z_np = _noise(state, len(x_np))

    def build():
        b = bind(state, "d")
        x, z = b.tape.constant(x_np, "x"), b.tape.constant(z_np, "z")
        if cfg.loss_kind == "ckipm":
            loss, parts = ckipm_discriminator_loss(state, b, x, z)
        elif cfg.loss_kind == "mmd2":
            loss, _, parts = mmd_baseline_losses(state, b, x, z)
        else:
            loss, _, parts = wgan_gp_losses(state, b, x, z)
        _check_loss(float(loss.value), parts, state, "discriminator")
        wrt = list(b.d.values()) + ([b.xi] if b.xi is not None else [])
        return float(loss.value), ad.gradient(loss, wrt)

    value, grads = _guard(build, state, "discriminator")
    state.opt_d.step(state.D.weights, {k[2:]: grads[k] for k in grads if k.startswith("D.")})
    if state.logits is not None:
        state.opt_xi.step({"xi": state.kernel.logits}, {"xi": grads["xi"]})
        state.xi_updates += 1
    state.last_loss_d = value
    return value


def generator_step(state: TrainState) -> float:
    cfg = state.config
    n = len(state.train_set) if cfg.batch_size is None else cfg.batch_size
    z_np = _noise(state, n)
    x_np = _real_batch(state) if cfg.loss_kind == "mmd2" else None

    def build():
        b = bind(state, "g")
        z = b.tape.constant(z_np, "z")
        if cfg.loss_kind == "ckipm":
            loss, parts = ckipm_generator_loss(state, b, z)
        elif cfg.loss_kind == "mmd2":
            _, loss, parts = mmd_baseline_losses(state, b, b.tape.constant(x_np, "x"), z, with_penalty=False)
        else:
            fake = generate(state, b, z)
            loss = -ad.mean(discriminate(state, b, fake))
            parts = {}
        _check_loss(float(loss.value), parts, state, "generator")
        wrt = list(b.g.values()) + ([b.xi] if b.xi is not None else [])
        return float(loss.value), ad.gradient(loss, wrt)

    value, grads = _guard(build, state, "generator")
    state.opt_g.step(state.G.weights, {k[2:]: grads[k] for k in grads if k.startswith("G.")})
    if state.logits is not None:
        state.opt_xi.step({"xi": state.kernel.logits}, {"xi": grads["xi"]})
        state.xi_updates += 1
    state.last_loss_g = value
    return value


def train_iteration(state: TrainState) -> None:
    """One generator iteration: n_d discriminator steps, then one generator step."""
    for _ in range(state.config.n_d):
        discriminator_step(state)
    generator_step(state)
    state.iteration += 1


def sample_generator(state: TrainState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points with eval-phase BatchNorm (running statistics)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z = datasets.make_noise(n, state.config.noise_dim, rng)
    return nets.apply(state.g_spec, state.G, z, "eval")


def evaluate_state(state: TrainState, n: int | None = None, rng: np.random.Generator | None = None) -> M.MetricsReport:
    cfg = state.config
    n = cfg.eval_samples if n is None else n
    rng = stream(cfg.seed, "eval", state.iteration) if rng is None else rng
    samples = sample_generator(state, n, rng)
    modes, hq, kl = M.evaluate_samples(samples, cfg.mixture(), state.train_set)
    return M.MetricsReport(state.iteration, modes, hq, kl, state.last_loss_d, state.last_loss_g,
                           state.xi(), state.elapsed if cfg.log_wall_time else 0.0)


def run(state: TrainState) -> Iterator[M.MetricsReport]:
    """Train until ``config.iterations``, yielding a report at the start (for a
    fresh state), every ``eval_every`` iterations, and at the end."""
    cfg = state.config
    if state.iteration == 0:
        yield evaluate_state(state)
    while state.iteration < cfg.iterations:
        t0 = time.perf_counter()
        train_iteration(state)
        if cfg.log_wall_time:
            state.elapsed += time.perf_counter() - t0
        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
            yield evaluate_state(state)


def train(config: TrainConfig, state: TrainState | None = None) -> tuple[TrainState, list[M.MetricsReport]]:
    state = init_state(config) if state is None else state
    reports = list(run(state))
    return state, reports
