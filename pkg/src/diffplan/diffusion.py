"""Conditional diffusion model used as a differentiable scenario generator.

The denoiser is a one-hidden-layer perceptron that predicts the clean,
normalized load residual from a noisy residual, the policy vector, the day
context and the step index. Sampling follows the noise-free reverse update,
so a scenario is a deterministic function of ``(policy, context, noise)`` and
can be differentiated with respect to the policy.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import as_hourly, as_policy_array, broadcast_rows, context_arrays
from .simkit import HOURS, LoadDataset

log = logging.getLogger(__name__)

MODEL_FORMAT = "diffplan-generator"
MODEL_VERSION = 1
JACOBIAN_CHUNK = 32  # scenarios per reverse pass in sample_with_grad
INPUT_DIM = HOURS + 4 + HOURS + HOURS + 1


class TrainingDivergedError(FloatingPointError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    @property
    def S(self) -> int:
        return self.beta.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def reverse_coefficients(self, s: int, sampler: str = "posterior_mean") -> tuple[float, float]:
        """(a, b) with x_{s-1} = a * x_s + b * x0_hat for 1-based step s.

        ``posterior_mean`` is the noise-free ancestral update
        ``(x_s - (1 - alpha_s) / sqrt(1 - abar_s) * (x_s - sqrt(abar_s) x0_hat)) / sqrt(alpha_s)``;
        ``ddim`` is the deterministic implicit update, which keeps the sample spread.
        """
        alpha = self.alpha[s - 1]
        abar = self.alpha_bar[s - 1]
        if sampler == "posterior_mean":
            k = (1.0 - alpha) / np.sqrt(1.0 - abar)
            inv = 1.0 / np.sqrt(alpha)
            return float(inv * (1.0 - k)), float(inv * k * np.sqrt(abar))
        if sampler == "ddim":
            abar_prev = self.alpha_bar[s - 2] if s > 1 else 1.0
            a = np.sqrt((1.0 - abar_prev) / (1.0 - abar))
            return float(a), float(np.sqrt(abar_prev) - a * np.sqrt(abar))
        raise ValueError(f"unknown sampler {sampler!r}")


def make_schedule(S: int = 100, beta_first: float = 1e-3, beta_last: float = 0.2) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_first`` to ``beta_last``."""
    if S < 1:
        raise ValueError("S must be at least 1")
    if not (0.0 < beta_first <= beta_last < 1.0):
        raise ValueError(f"need 0 < beta_first <= beta_last < 1, got {beta_first}, {beta_last}")
    return NoiseSchedule(np.linspace(beta_first, beta_last, S) if S > 1 else np.array([beta_first]))


def forward_diffuse(x0, s: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    if not 1 <= s <= schedule.S:
        raise ValueError(f"step {s} outside 1..{schedule.S}")
    abar = schedule.alpha_bar[s - 1]
    return np.sqrt(abar) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=float)


def _safe_sd(sd: np.ndarray) -> np.ndarray:
    return np.where(sd < 1e-8, 1.0, sd)


@dataclass(frozen=True)
class NormStats:
    """Per-channel affine normalization of residuals and conditions."""

    residual_mean: np.ndarray
    residual_sd: np.ndarray
    policy_mean: np.ndarray
    policy_sd: np.ndarray
    temp_mean: np.ndarray
    temp_sd: np.ndarray
    base_mean: np.ndarray
    base_sd: np.ndarray
    load_min: float
    load_max: float

    @classmethod
    def from_dataset(cls, data: LoadDataset) -> "NormStats":
        r = data.residual
        return cls(
            r.mean(axis=0), _safe_sd(r.std(axis=0)),
            data.policy.mean(axis=0), _safe_sd(data.policy.std(axis=0)),
            data.temperature.mean(axis=0), _safe_sd(data.temperature.std(axis=0)),
            data.base_load.mean(axis=0), _safe_sd(data.base_load.std(axis=0)),
            float(data.demand.min()), float(data.demand.max()),
        )

    def normalize_residual(self, r):
        return (r - self.residual_mean) / self.residual_sd

    def denormalize_residual(self, x):
        return x * self.residual_sd + self.residual_mean

    def conditions(self, policy, temperature, base_load) -> np.ndarray:
        return np.hstack([
            (policy - self.policy_mean) / self.policy_sd,
            (temperature - self.temp_mean) / self.temp_sd,
            (base_load - self.base_mean) / self.base_sd,
        ])


_PARAM_NAMES = ("W1", "b1", "W2", "b2")


def init_params(hidden: int, rng, n_in: int = INPUT_DIM, n_out: int = HOURS) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, n_out)),
        "b2": np.zeros(n_out),
    }


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class DiffusionScenarioGenerator(BaseEstimator):
    """Residual diffusion model with a deterministic, differentiable sampler.

    Parameters
    ----------
    n_steps, beta_first, beta_last : noise schedule (linear betas).
    hidden : width of the single hidden layer.
    activation : ``"tanh"`` or ``"silu"``; must be smooth.
    learning_rate, epochs, batch_size : minibatch training settings.
    optimizer : ``"adam"`` or ``"sgd"``.
    lr_decay : ``"cosine"`` anneals the rate to 1% over training; ``"none"`` keeps it fixed.
    sampler : reverse update, ``"posterior_mean"`` or ``"ddim"``.
    ema_decay : if set, the fitted weights are an exponential moving average of the iterates.
    random_state : seed for initialization and minibatch noise.
    """

    def __init__(self, n_steps=100, beta_first=1e-3, beta_last=0.2, hidden=128, activation="tanh",
                 learning_rate=3e-3, epochs=200, batch_size=64, optimizer="adam", lr_decay="cosine",
                 sampler="posterior_mean", ema_decay=None, random_state=0):
        self.n_steps = n_steps
        self.beta_first = beta_first
        self.beta_last = beta_last
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr_decay = lr_decay
        self.sampler = sampler
        self.ema_decay = ema_decay
        self.random_state = random_state

    # -- training ----------------------------------------------------------

    def fit(self, X: LoadDataset, y=None):
        if not isinstance(X, LoadDataset):
            raise TypeError("fit expects a LoadDataset")
        if len(X) == 0:
            raise ValueError("empty dataset")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        rng = np.random.default_rng(self.random_state)
        self.schedule_ = make_schedule(self.n_steps, self.beta_first, self.beta_last)
        self.norm_ = NormStats.from_dataset(X)
        self.params_ = init_params(self.hidden, rng)

        x0_all = self.norm_.normalize_residual(X.residual)
        cond_all = self.norm_.conditions(X.policy, X.temperature, X.base_load)
        abar = self.schedule_.alpha_bar
        S = self.schedule_.S
        n = len(X)
        B = min(self.batch_size, n)
        opt = _Adam(self.params_, self.learning_rate) if self.optimizer == "adam" else None
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        ema = {k: v.copy() for k, v in self.params_.items()} if self.ema_decay is not None else None

        self.loss_history_ = []
        for epoch in range(self.epochs):
            lr = self._rate(epoch)
            if opt is not None:
                opt.lr = lr
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, B):
                idx = order[start:start + B]
                x0 = x0_all[idx]
                s = rng.integers(1, S + 1, size=idx.size)
                eps = rng.standard_normal(x0.shape)
                ab = abar[s - 1][:, None]
                xs = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
                inp = np.hstack([xs, cond_all[idx], (s / S)[:, None]])
                loss, grads = self._loss_and_grad(self.params_, inp, x0)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                        f"last finite epoch loss {self.loss_history_[-1] if self.loss_history_ else None}")
                if opt is None:
                    for k in _PARAM_NAMES:
                        self.params_[k] = self.params_[k] - lr * grads[k]
                else:
                    opt.step(self.params_, grads)
                if ema is not None:
                    for k in _PARAM_NAMES:
                        ema[k] = self.ema_decay * ema[k] + (1.0 - self.ema_decay) * self.params_[k]
                total += loss * idx.size
            self.loss_history_.append(total / n)
            if epoch % 20 == 0 or epoch == self.epochs - 1:
                log.info("epoch %d loss %.6f", epoch, self.loss_history_[-1])
        if ema is not None:
            self.params_ = ema
        return self

    def _rate(self, epoch: int) -> float:
        if self.lr_decay == "none" or self.epochs <= 1:
            return self.learning_rate
        if self.lr_decay != "cosine":
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * frac)))

    def _loss_and_grad(self, params, inp, target):
        """Minibatch loss (1/B) sum ||x0 - x0_hat||^2 and its parameter gradient."""
        tape = ad.Tape()
        leaves = {k: tape.leaf(params[k]) for k in _PARAM_NAMES}
        pred = ad.mlp_apply(leaves, tape.constant(inp), self.activation)
        loss = ad.sum_squares(ad.sub(pred, tape.constant(target)), 1.0 / inp.shape[0])
        if not np.isfinite(loss.value[0]):
            return float(loss.value[0]), None
        g = tape.backward(loss, np.ones(1), list(leaves.values()))
        return float(loss.value[0]), {k: g[leaf] for k, leaf in leaves.items()}

    # -- sampling ----------------------------------------------------------

    def _check(self):
        try:
            check_is_fitted(self, ["params_", "norm_", "schedule_"])
        except NotFittedError:
            raise NotFittedError("generator is not trained; call fit() or load a model file") from None

    def denoise(self, xs, s: int, policy, temperature, base_load) -> np.ndarray:
        """Predicted clean normalized residual for rows at 1-based step ``s``."""
        self._check()
        pol, temp, base, xs = broadcast_rows(as_policy_array(policy), as_hourly(temperature, "temperature"),
                                             as_hourly(base_load, "base_load"), as_hourly(xs, "x_s"))
        cond = self.norm_.conditions(pol, temp, base)
        tape = ad.Tape()
        inp = np.hstack([xs, cond, np.full((xs.shape[0], 1), s / self.schedule_.S)])
        return ad.mlp_apply(self.params_, tape.constant(inp), self.activation).value

    def _chain(self, tape: ad.Tape, policy: ad.Tensor, temperature, base_load, eps) -> ad.Tensor:
        """Record the full reverse chain and the denormalized, floored scenario."""
        norm = self.norm_
        S = self.schedule_.S
        n = eps.shape[0]
        inv_sd = tape.constant(np.diag(1.0 / norm.policy_sd))
        pol = ad.add(ad.matmul(policy, inv_sd), tape.constant(-norm.policy_mean / norm.policy_sd))
        temp = tape.constant((temperature - norm.temp_mean) / norm.temp_sd)
        base = tape.constant((base_load - norm.base_mean) / norm.base_sd)
        weights = {k: tape.constant(v) for k, v in self.params_.items()}
        x = tape.constant(eps)
        for s in range(S, 0, -1):
            step = tape.constant(np.full((n, 1), s / S))
            x0_hat = ad.mlp_apply(weights, ad.concat([x, pol, temp, base, step]), self.activation)
            a, b = self.schedule_.reverse_coefficients(s, self.sampler)
            x = ad.add(ad.scale(x, a), ad.scale(x0_hat, b))
        resid = ad.add(ad.matmul(x, tape.constant(np.diag(norm.residual_sd))), tape.constant(norm.residual_mean))
        return ad.floor_zero(ad.add(resid, tape.constant(base_load)))

    def _prepare(self, policy, context, eps):
        self._check()
        pol = as_policy_array(policy)
        temp, base = context_arrays(context)
        eps = as_hourly(eps, "eps")
        return broadcast_rows(pol, temp, base, eps)

    def sample(self, policy, context, eps) -> np.ndarray:
        """Scenario(s) in p.u. for the given policy, context and initial noise.

        Inputs broadcast over rows; a single row in gives a 1-D result.
        """
        single = np.ndim(eps) == 1
        pol, temp, base, eps = self._prepare(policy, context, eps)
        tape = ad.Tape()
        out = self._chain(tape, tape.constant(pol), temp, base, eps).value
        return out[0] if single and out.shape[0] == 1 else out

    def sample_with_grad(self, policy, context, eps) -> tuple[np.ndarray, np.ndarray]:
        """Scenarios and their policy Jacobians, shapes (n, 24) and (n, 24, 4).

        Each row is replicated once per output hour so a single reverse pass
        with an identity seed yields every Jacobian row. Scenarios come from an
        unreplicated forward pass so they match ``sample`` bit for bit.
        """
        single = np.ndim(eps) == 1
        pol, temp, base, eps = self._prepare(policy, context, eps)
        n = pol.shape[0]
        rep = lambda a: np.repeat(a, HOURS, axis=0)
        jac = np.empty((n, HOURS, 4))
        # the tape holds every step's activations, so bound the replicated rows
        for lo in range(0, n, JACOBIAN_CHUNK):
            rows = slice(lo, min(lo + JACOBIAN_CHUNK, n))
            tape = ad.Tape()
            leaf = tape.leaf(rep(pol[rows]))
            out = self._chain(tape, leaf, rep(temp[rows]), rep(base[rows]), rep(eps[rows]))
            seed = np.tile(np.eye(HOURS), (rows.stop - lo, 1))
            jac[rows] = tape.backward(out, seed, [leaf])[leaf].reshape(-1, HOURS, 4)
        plain = ad.Tape()
        scen = self._chain(plain, plain.constant(pol), temp, base, eps).value
        if single and n == 1:
            return scen[0], jac[0]
        return scen, jac

    def sample_vjp(self, policy, context, eps, cotangent) -> tuple[np.ndarray, np.ndarray]:
        """Scenarios and cotangent-weighted policy gradients, shapes (n, 24) and (n, 4)."""
        pol, temp, base, eps = self._prepare(policy, context, eps)
        cot = as_hourly(cotangent, "cotangent", pol.shape[0])
        tape = ad.Tape()
        leaf = tape.leaf(pol)
        out = self._chain(tape, leaf, temp, base, eps)
        return out.value, tape.backward(out, cot, [leaf])[leaf]

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        self._check()
        arrays = {f"param.{k}": v for k, v in self.params_.items()}
        arrays["schedule.beta"] = self.schedule_.beta
        for f in NormStats.__dataclass_fields__:
            v = getattr(self.norm_, f)
            arrays[f"norm.{f}"] = np.atleast_1d(np.asarray(v, dtype=float))
        encoded = {k: _encode(v) for k, v in sorted(arrays.items())}
        digest = hashlib.sha256()
        for k in sorted(arrays):
            digest.update(k.encode())
            digest.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "hyperparameters": self.get_params(),
            "arrays": encoded,
            "sha256": digest.hexdigest(),
            "loss_history": [float(v) for v in getattr(self, "loss_history_", [])],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, doc: dict, verify: bool = True) -> "DiffusionScenarioGenerator":
        if doc.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"expected format {MODEL_FORMAT!r}, found {doc.get('format')!r}")
        if doc.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"expected model version {MODEL_VERSION}, found {doc.get('version')!r}")
        arrays = {k: _decode(v) for k, v in doc["arrays"].items()}
        if verify:
            digest = hashlib.sha256()
            for k in sorted(arrays):
                digest.update(k.encode())
                digest.update(arrays[k].astype("<f8").tobytes())
            if digest.hexdigest() != doc.get("sha256"):
                raise ModelFormatError("model checksum mismatch; file is corrupted")
        model = cls(**doc["hyperparameters"])
        model.params_ = {k: arrays[f"param.{k}"] for k in _PARAM_NAMES}
        model.schedule_ = NoiseSchedule(arrays["schedule.beta"])
        fields = {}
        for f in NormStats.__dataclass_fields__:
            v = arrays[f"norm.{f}"]
            fields[f] = float(v[0]) if f in ("load_min", "load_max") else v
        model.norm_ = NormStats(**fields)
        model.loss_history_ = list(doc.get("loss_history", []))
        return model

    @classmethod
    def load(cls, path, verify: bool = True) -> "DiffusionScenarioGenerator":
        return cls.from_dict(json.loads(Path(path).read_text()), verify=verify)


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "<f8":
        raise ModelFormatError(f"unsupported array dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
