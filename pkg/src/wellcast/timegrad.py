"""Autoregressive diffusion forecaster: a GRU summarizes the observed past
and conditions a per-step denoising sampler.

Training teacher-forces the recurrence: the GRU consumes ground-truth values
over a context window and the adjacent prediction window, and the diffusion
loss scores each prediction step against noise injected on the true value,
conditioned on the hidden state from the previous step.  Forecasting replaces
ground truth with the model's own draws, one reverse-chain rollout per step,
and carries the sampled value back into the recurrence.

Each window is normalized by its own context statistics; forecasts are mapped
back to the original scale before they leave this module.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .diffusion import (EpsilonNet, NoiseSchedule, build_schedule, ddpm_loss,
                        reverse_step)
from .errors import ContractError, ParameterError, TrainingError
from .evaluation import ForecastEnsemble
from .optim import AdamW
from .tensor import (Tensor, add, backward, concat, constant, matmul, mul,
                     no_grad, parameter, sigmoid, sub, tanh, zeros_parameter)


class GRUCell:
    """Standard gated recurrent unit.

    z = sigmoid(x Wz + h Uz + bz); r = sigmoid(x Wr + h Ur + br)
    cand = tanh(x Wh + (r * h) Uh + bh); h' = (1 - z) * h + z * cand
    Gates are sigmoid outputs, so h' is an elementwise convex combination of
    the previous state and a tanh value: |h'| <= max(|h|, 1).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        mk_w = lambda: parameter(rng, (self.input_dim, self.hidden_dim))
        mk_u = lambda: parameter(rng, (self.hidden_dim, self.hidden_dim))
        mk_b = lambda: zeros_parameter((self.hidden_dim,))
        self.w_z, self.u_z, self.b_z = mk_w(), mk_u(), mk_b()
        self.w_r, self.u_r, self.b_r = mk_w(), mk_u(), mk_b()
        self.w_h, self.u_h, self.b_h = mk_w(), mk_u(), mk_b()

    def params(self) -> list:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[1] != self.input_dim or h.shape[1] != self.hidden_dim:
            raise ContractError(
                f"gru_step shapes {x.shape}/{h.shape} do not match cell "
                f"({self.input_dim}/{self.hidden_dim})")
        z = sigmoid(add(add(matmul(x, self.w_z), matmul(h, self.u_z)), self.b_z))
        r = sigmoid(add(add(matmul(x, self.w_r), matmul(h, self.u_r)), self.b_r))
        cand = tanh(add(add(matmul(x, self.w_h), matmul(mul(r, h), self.u_h)),
                        self.b_h))
        keep = sub(constant(np.ones(z.shape)), z)
        return add(mul(keep, h), mul(z, cand))


def gru_step(x, h, cell: GRUCell) -> Tensor:
    """Functional form; accepts 1-D or [B, ...] arrays as well as tensors."""
    x_t = x if isinstance(x, Tensor) else constant(np.atleast_2d(x))
    h_t = h if isinstance(h, Tensor) else constant(np.atleast_2d(h))
    return cell.step(x_t, h_t)


@dataclass
class WindowStats:
    """Per-dimension affine statistics of one context window."""

    mean: np.ndarray
    scale: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.mean


def normalize_window(window: np.ndarray, scale_by_variance: bool = False):
    """Center and scale a [L, D] window per dimension.

    The scale is the population standard deviation plus a 1e-6 guard so
    constant windows normalize to exact zeros.  scale_by_variance swaps in
    the variance for the literal reading of the normalization description.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    if window.shape[0] < 1:
        raise ParameterError("window must contain at least one step")
    mean = window.mean(axis=0)
    spread = window.var(axis=0) if scale_by_variance else window.std(axis=0)
    stats = WindowStats(mean=mean, scale=spread + 1e-6)
    return stats.normalize(window), stats


class TimeGradModel:
    def __init__(self, data_dim: int, hidden_dim: int = 64, n_layers: int = 1,
                 context_length: int = 90, prediction_length: int = 45,
                 sched: NoiseSchedule | None = None, loss_norm: str = "l1",
                 scale_by_variance: bool = False, paper_literal_sampler: bool = False,
                 seed: int = 0):
        if context_length < 1 or prediction_length < 1:
            raise ParameterError("context and prediction lengths must be >= 1")
        if loss_norm not in ("l1", "l2"):
            raise ParameterError("loss_norm must be 'l1' or 'l2'")
        self.data_dim = int(data_dim)
        self.hidden_dim = int(hidden_dim)
        self.context_length = int(context_length)
        self.prediction_length = int(prediction_length)
        self.loss_norm = loss_norm
        self.scale_by_variance = bool(scale_by_variance)
        self.paper_literal_sampler = bool(paper_literal_sampler)
        self.sched = sched if sched is not None else build_schedule()
        rng = rng_mod.stream(seed, rng_mod.TRAIN, 9000)
        self.layers = [GRUCell(data_dim if i == 0 else hidden_dim, hidden_dim, rng)
                       for i in range(int(n_layers))]
        self.eps_net = EpsilonNet(data_dim, hidden_dim, self.sched.n_steps, rng=rng)

    def params(self) -> list:
        out = []
        for cell in self.layers:
            out.extend(cell.params())
        out.extend(self.eps_net.params())
        return out

    def initial_state(self, batch: int = 1) -> list:
        # h_0 = 0 for every layer
        return [constant(np.zeros((batch, self.hidden_dim))) for _ in self.layers]

    def step_state(self, x, states: list) -> list:
        """Advance all layers one step; layer i feeds layer i+1."""
        inp = x if isinstance(x, Tensor) else constant(np.atleast_2d(x))
        new_states = []
        for cell, h in zip(self.layers, states):
            h_new = cell.step(inp, h)
            new_states.append(h_new)
            inp = h_new
        return new_states

    def unroll(self, values: np.ndarray, states: list | None = None) -> list:
        states = states if states is not None else self.initial_state()
        for t in range(values.shape[0]):
            states = self.step_state(values[t:t + 1], states)
        return states

    # -- persistence ----------------------------------------------------

    def state_records(self) -> dict:
        rec = {
            "timegrad/config": np.array([
                self.data_dim, self.hidden_dim, len(self.layers),
                self.context_length, self.prediction_length,
                1.0 if self.loss_norm == "l1" else 2.0,
                1.0 if self.scale_by_variance else 0.0,
                1.0 if self.paper_literal_sampler else 0.0,
            ], dtype=np.float64),
            "timegrad/sched": np.array([
                self.sched.n_steps, self.sched.beta_start, self.sched.beta_end]),
        }
        names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        for i, cell in enumerate(self.layers):
            for name, p in zip(names, cell.params()):
                rec[f"timegrad/gru/{i}/{name}"] = p.data
        rec.update(self.eps_net.state_records(prefix="timegrad/eps"))
        return rec

    @classmethod
    def from_records(cls, rec: dict) -> "TimeGradModel":
        cfg = rec["timegrad/config"]
        sc = rec["timegrad/sched"]
        model = cls(
            data_dim=int(cfg[0]), hidden_dim=int(cfg[1]), n_layers=int(cfg[2]),
            context_length=int(cfg[3]), prediction_length=int(cfg[4]),
            sched=build_schedule(int(sc[0]), sc[1], sc[2]),
            loss_norm="l1" if cfg[5] == 1.0 else "l2",
            scale_by_variance=bool(cfg[6]), paper_literal_sampler=bool(cfg[7]))
        names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        for i, cell in enumerate(model.layers):
            for name, p in zip(names, cell.params()):
                p.data = rec[f"timegrad/gru/{i}/{name}"].copy()
        model.eps_net = EpsilonNet.from_records(rec, prefix="timegrad/eps")
        return model


def _train_values(panel_or_values) -> np.ndarray:
    if hasattr(panel_or_values, "values") and hasattr(panel_or_values, "split_index"):
        p = panel_or_values
        return np.asarray(p.values[:p.split_index], dtype=np.float64)
    return np.atleast_2d(np.asarray(panel_or_values, dtype=np.float64))


def window_loss(model: TimeGradModel, ctx: np.ndarray, target: np.ndarray,
                rng: np.random.Generator) -> Tensor:
    """Diffusion loss summed over one prediction window (teacher forcing)."""
    ctx_n, stats = normalize_window(ctx, model.scale_by_variance)
    target_n = stats.normalize(target)
    states = model.unroll(ctx_n)
    h_rows = [states[-1]]
    for t in range(target_n.shape[0] - 1):
        states = model.step_state(target_n[t:t + 1], states)
        h_rows.append(states[-1])
    h_batch = concat(h_rows, axis=0)
    return ddpm_loss(target_n, h_batch, model.eps_net, model.sched, rng,
                     norm=model.loss_norm)


def train_epoch(model: TimeGradModel, panel_or_values, opt: AdamW,
                rng: np.random.Generator, windows_per_epoch: int = 64) -> float:
    """One epoch of randomly placed context+prediction windows.

    Windows are sampled from the training span only; each window takes one
    optimizer step.  Returns the mean window loss (0.0 for an empty epoch).
    """
    values = _train_values(panel_or_values)
    span = values.shape[0]
    total = model.context_length + model.prediction_length
    if span < total:
        raise ParameterError(
            f"training span {span} shorter than context+prediction {total}")
    if windows_per_epoch == 0:
        return 0.0
    losses = []
    for w in range(windows_per_epoch):
        start = int(rng.integers(0, span - total + 1))
        ctx = values[start:start + model.context_length]
        target = values[start + model.context_length:start + total]
        loss = window_loss(model, ctx, target, rng)
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite loss at window={w} start={start}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def validation_loss(model: TimeGradModel, values: np.ndarray,
                    starts, seed: int) -> float:
    """Loss over fixed windows with a fixed noise stream (no updates)."""
    rng = rng_mod.stream(seed, rng_mod.EVAL)
    total = model.context_length + model.prediction_length
    losses = []
    with no_grad():
        for start in starts:
            ctx = values[start:start + model.context_length]
            target = values[start + model.context_length:start + total]
            loss = window_loss(model, ctx, target, rng)
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def forecast(model: TimeGradModel, context: np.ndarray, horizon: int,
             n_samples: int, seed: int, path_keys=None,
             timestamps=None) -> ForecastEnsemble:
    """Ensemble forecast: n_samples independent autoregressive rollouts.

    Every path owns a Philox noise stream keyed by (seed, PATH, key), so the
    set of paths depends only on the set of keys, not their order.  Paths
    advance in lockstep as one batch for speed; the arithmetic per row is
    path-independent.
    """
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    if context.shape[0] != model.context_length:
        raise ParameterError(
            f"context length {context.shape[0]} != model context "
            f"({model.context_length})")
    if context.shape[1] != model.data_dim:
        raise ParameterError("context dimension does not match the model")
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    if path_keys is None:
        path_keys = list(range(n_samples))
    if len(path_keys) != n_samples:
        raise ParameterError("path_keys must provide one key per sample path")

    ctx_n, stats = normalize_window(context, model.scale_by_variance)
    big_n = model.sched.n_steps
    dim = model.data_dim
    # noise[p, t, 0] seeds x_N for step t; noise[p, t, i] is z at reverse
    # step n = N - i + 1 (the n = 1 step is forced to z = 0)
    noise = np.stack([
        rng_mod.stream(seed, rng_mod.PATH, key).standard_normal((horizon, big_n, dim))
        for key in path_keys])

    with no_grad():
        states = model.unroll(ctx_n)
        states = [constant(np.repeat(h.data, n_samples, axis=0)) for h in states]
        out = np.empty((n_samples, horizon, dim))
        for t in range(horizon):
            x = noise[:, t, 0, :]
            h_cond = states[-1].data
            for n in range(big_n, 0, -1):
                z = np.zeros_like(x) if n == 1 else noise[:, t, big_n - n + 1, :]
                x = reverse_step(x, h_cond, n, model.eps_net, model.sched, z,
                                 paper_literal=model.paper_literal_sampler)
            out[:, t, :] = x
            states = model.step_state(x, states)
    return ForecastEnsemble(samples=stats.denormalize(out),
                            timestamps=timestamps, denormalized=True)


@dataclass
class TrainHistory:
    train_loss: list
    val_loss: list

    @property
    def gap(self) -> list:
        """Validation-minus-training gap per epoch (overfitting indicator)."""
        return [v - t for t, v in zip(self.train_loss, self.val_loss)]


def fit(model: TimeGradModel, panel_or_values, epochs: int, seed: int,
        lr: float = 1e-4, windows_per_epoch: int = 64, opt: AdamW | None = None,
        val_fraction: float = 0.1, start_epoch: int = 0,
        on_epoch=None) -> tuple:
    """Train for ``epochs`` epochs with a held-out validation tail.

    The last val_fraction of the *training* span is reserved for validation
    windows; training windows are drawn from the remainder, so validation
    never influences updates and neither part touches the test span.
    Returns (history, optimizer) so callers can checkpoint optimizer state.
    """
    values = _train_values(panel_or_values)
    total = model.context_length + model.prediction_length
    if values.shape[0] < total:
        raise ParameterError("training span shorter than one window")
    if opt is None:
        opt = AdamW(model.params(), lr=lr)
    val_span = int(val_fraction * values.shape[0])
    val_starts = []
    if val_span >= total and values.shape[0] - val_span >= total:
        # validation tail is fully disjoint from the training windows
        val_lo = values.shape[0] - val_span
        step = max(1, (val_span - total) // 4 + 1)
        val_starts = list(range(val_lo, values.shape[0] - total + 1, step))[:5]
        train_values = values[:val_lo]
    else:
        train_values = values
    history = TrainHistory([], [])
    for e in range(start_epoch, start_epoch + epochs):
        rng = rng_mod.stream(seed, rng_mod.TRAIN, e)
        tr = train_epoch(model, train_values, opt, rng, windows_per_epoch)
        vl = validation_loss(model, values, val_starts, seed)
        history.train_loss.append(tr)
        history.val_loss.append(vl)
        if on_epoch is not None:
            on_epoch(e, tr, vl)
    return history, opt
