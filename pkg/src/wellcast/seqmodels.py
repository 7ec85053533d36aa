"""Encoder-decoder forecasters assembled from the attention kernels.

Two models share one skeleton: a linear value embedding plus an additive
time encoding, an encoder, a two-to-three layer decoder with masked
self-attention and cross-attention, and a diagonal-Gaussian output head.

The sparse-attention model runs top-query attention in the encoder and the
masked decoder, halves the encoder sequence with a distill step after every
encoder block, and keeps replica stacks on tail-halved inputs whose outputs
are concatenated into the cross-attention memory.  The dense baseline uses
three full-attention layers on each side, no distilling, and a higher
dropout rate.

Decoding is generative and one-shot: the decoder input concatenates a start
token (the tail of the encoder context) with a zero-valued placeholder that
carries only the target timestamps, and every target position is emitted in
a single forward pass.  An instrumented counter records decoder passes so
tests can assert the one-pass contract.
"""

import numpy as np

from . import rng as rng_mod
from .attention import (AttentionConfig, DistillWeights, MultiHeadWeights,
                        distill, multi_head)
from .errors import ContractError, ParameterError, TrainingError
from .evaluation import ForecastEnsemble
from .optim import AdamW
from .tensor import (Tensor, add, backward, clip, concat, constant, dropout,
                     elu, exp, layer_norm, matmul, mul, no_grad, parameter,
                     scale, slice_rows, sub, tsum, zeros_parameter)
from .timegrad import TrainHistory, normalize_window

LOG_TWO_PI = float(np.log(2.0 * np.pi))
LOG_VAR_BOUND = 20.0
DAYS_PER_YEAR = 365.25


def time_encoding(timestamps, d_model: int, stride: float, anchor: float) -> np.ndarray:
    """Additive encoding from two time features: the linear epoch index at
    the native stride (sinusoidal over positions relative to the window
    anchor) and the day-of-year phase folded into the first two channels."""
    ts = np.asarray(timestamps, dtype=np.float64)
    pos = (ts - anchor) / stride
    half = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * half / d_model)
    enc = np.empty((len(ts), d_model))
    enc[:, 0::2] = np.sin(pos[:, None] * freq[None, :])
    enc[:, 1::2] = np.cos(pos[:, None] * freq[None, :])
    phase = 2.0 * np.pi * (ts % DAYS_PER_YEAR) / DAYS_PER_YEAR
    enc[:, 0] += np.sin(phase)
    enc[:, 1] += np.cos(phase)
    return enc


class ValueEmbedding:
    def __init__(self, data_dim: int, d_model: int, rng: np.random.Generator):
        self.w = parameter(rng, (data_dim, d_model))
        self.d_model = d_model

    def params(self):
        return [self.w]

    def forward(self, values: np.ndarray, timestamps, stride, anchor) -> Tensor:
        proj = matmul(constant(np.atleast_2d(values)), self.w)
        return add(proj, constant(
            time_encoding(timestamps, self.d_model, stride, anchor)))


class FeedForward:
    def __init__(self, d_model: int, width: int, rng: np.random.Generator):
        self.w1 = parameter(rng, (d_model, width))
        self.b1 = zeros_parameter((width,))
        self.w2 = parameter(rng, (width, d_model))
        self.b2 = zeros_parameter((d_model,))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(elu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


class ResidualNorm:
    def __init__(self, d_model: int):
        self.gain = Tensor(np.ones(d_model), requires_grad=True)
        self.bias = zeros_parameter((d_model,))

    def params(self):
        return [self.gain, self.bias]

    def forward(self, x: Tensor, sublayer_out: Tensor) -> Tensor:
        return layer_norm(add(x, sublayer_out), self.gain, self.bias)


class EncoderBlock:
    def __init__(self, d_model, n_heads, ff_width, rng):
        self.attn = MultiHeadWeights(d_model, n_heads, rng)
        self.norm1 = ResidualNorm(d_model)
        self.ff = FeedForward(d_model, ff_width, rng)
        self.norm2 = ResidualNorm(d_model)

    def params(self):
        return (self.attn.params() + self.norm1.params() + self.ff.params()
                + self.norm2.params())

    def forward(self, x, cfg, mode, p_drop, training, drop_rng):
        a = multi_head(x, x, self.attn, cfg, mode=mode, causal=False)
        x = self.norm1.forward(x, dropout(a, p_drop, training, drop_rng))
        f = self.ff.forward(x)
        return self.norm2.forward(x, dropout(f, p_drop, training, drop_rng))


class DecoderLayer:
    def __init__(self, d_model, n_heads, ff_width, rng):
        self.self_attn = MultiHeadWeights(d_model, n_heads, rng)
        self.norm1 = ResidualNorm(d_model)
        self.cross_attn = MultiHeadWeights(d_model, n_heads, rng)
        self.norm2 = ResidualNorm(d_model)
        self.ff = FeedForward(d_model, ff_width, rng)
        self.norm3 = ResidualNorm(d_model)

    def params(self):
        return (self.self_attn.params() + self.norm1.params()
                + self.cross_attn.params() + self.norm2.params()
                + self.ff.params() + self.norm3.params())

    def forward(self, x, memory, cfg, self_mode, p_drop, training, drop_rng):
        a = multi_head(x, x, self.self_attn, cfg, mode=self_mode, causal=True)
        x = self.norm1.forward(x, dropout(a, p_drop, training, drop_rng))
        c = multi_head(x, memory, self.cross_attn, cfg, mode="full", causal=False)
        x = self.norm2.forward(x, dropout(c, p_drop, training, drop_rng))
        f = self.ff.forward(x)
        return self.norm3.forward(x, dropout(f, p_drop, training, drop_rng))


class GaussianHead:
    """Per-position diagonal Gaussian: d_model -> (mean, log variance).

    The log-variance map starts at zero so an untrained model emits unit
    variance in normalized space; a randomly initialized spread head makes
    early NLL steps erratic.
    """

    def __init__(self, d_model: int, data_dim: int, rng: np.random.Generator):
        self.w_mu = parameter(rng, (d_model, data_dim))
        self.b_mu = zeros_parameter((data_dim,))
        self.w_lv = zeros_parameter((d_model, data_dim))
        self.b_lv = zeros_parameter((data_dim,))

    def params(self):
        return [self.w_mu, self.b_mu, self.w_lv, self.b_lv]

    def forward(self, x: Tensor):
        mean = add(matmul(x, self.w_mu), self.b_mu)
        log_var = clip(add(matmul(x, self.w_lv), self.b_lv),
                       -LOG_VAR_BOUND, LOG_VAR_BOUND)
        return mean, log_var


def _ceil_half(n: int, times: int) -> int:
    for _ in range(times):
        n = (n + 1) // 2
    return n


class _SeqForecaster:
    """Shared machinery; concrete models fix attention mode and encoder shape."""

    attention_mode = "full"
    use_distill = False

    def __init__(self, data_dim, d_model, n_heads, ff_width, p_drop, c,
                 l_x, l_token, l_y, stride, seed):
        if l_token > l_x:
            raise ParameterError(f"start token {l_token} longer than context {l_x}")
        if min(l_x, l_token, l_y) < 1:
            raise ParameterError("sequence lengths must be >= 1")
        self.cfg = AttentionConfig(d_model=d_model, n_heads=n_heads, c=c)
        self.data_dim = int(data_dim)
        self.d_model = int(d_model)
        self.ff_width = int(ff_width)
        self.p_drop = float(p_drop)
        self.l_x = int(l_x)
        self.l_token = int(l_token)
        self.l_y = int(l_y)
        self.stride = float(stride)
        self.seed = int(seed)
        self.decoder_forward_count = 0
        rng = rng_mod.stream(seed, rng_mod.TRAIN, 7000)
        self.embed_enc = ValueEmbedding(data_dim, d_model, rng)
        self.embed_dec = ValueEmbedding(data_dim, d_model, rng)
        self._build(rng)
        self.head = GaussianHead(d_model, data_dim, rng)

    # concrete classes implement _build & _encode and params()

    def _shared_params(self):
        out = self.embed_enc.params() + self.embed_dec.params()
        for layer in self.decoder:
            out += layer.params()
        out += self.head.params()
        return out

    def named_params(self) -> dict:
        return {f"{self.kind}/p/{i}": p for i, p in enumerate(self.params())}

    def state_records(self) -> dict:
        rec = {f"{self.kind}/config": np.array(self._config_vector())}
        for name, p in self.named_params().items():
            rec[name] = p.data
        return rec

    def load_records(self, rec: dict) -> None:
        for name, p in self.named_params().items():
            if rec[name].shape != p.shape:
                raise ParameterError(f"checkpoint record {name} has wrong shape")
            p.data = rec[name].copy()

    def forward(self, x_enc, x_token, enc_timestamps, target_timestamps,
                training: bool = False, drop_rng=None):
        """One generative pass: Gaussian parameters for all target positions.

        The decoder consumes concat(token, zero placeholder); the placeholder
        rows carry only the target timestamps through the time encoding.
        """
        x_enc = np.atleast_2d(np.asarray(x_enc, dtype=np.float64))
        x_token = np.atleast_2d(np.asarray(x_token, dtype=np.float64))
        if x_enc.shape[0] != self.l_x:
            raise ParameterError(f"encoder input must have {self.l_x} rows")
        if x_token.shape[0] > self.l_x:
            raise ParameterError("start token longer than the encoder context")
        enc_ts = np.asarray(enc_timestamps, dtype=np.float64)
        tgt_ts = np.asarray(target_timestamps, dtype=np.float64)
        if len(tgt_ts) != self.l_y:
            raise ParameterError(f"target timestamps must cover {self.l_y} steps")
        if training and drop_rng is None:
            raise ContractError("training mode needs a dropout stream")
        anchor = float(enc_ts[0])
        drop = drop_rng if drop_rng is not None else np.random.default_rng(0)

        e = self.embed_enc.forward(x_enc, enc_ts, self.stride, anchor)
        e = dropout(e, self.p_drop, training, drop)
        memory = self._encode(e, training, drop)

        l_tok = x_token.shape[0]
        dec_vals = np.concatenate([x_token, np.zeros((self.l_y, self.data_dim))])
        dec_ts = np.concatenate([enc_ts[-l_tok:], tgt_ts])
        d = self.embed_dec.forward(dec_vals, dec_ts, self.stride, anchor)
        d = dropout(d, self.p_drop, training, drop)
        for layer in self.decoder:
            d = layer.forward(d, memory, self.cfg, self.attention_mode,
                              self.p_drop, training, drop)
        out = slice_rows(d, l_tok, l_tok + self.l_y)
        self.decoder_forward_count += 1
        return self.head.forward(out)


class InformerModel(_SeqForecaster):
    """Sparse-attention encoder-decoder with distilling and stack replicas."""

    kind = "informer"
    attention_mode = "prob"
    use_distill = True

    def __init__(self, data_dim, d_model=64, n_heads=4, ff_width=128,
                 p_drop=0.1, c=5.0, l_x=96, l_token=48, l_y=45,
                 n_stacks=2, main_blocks=2, stride=2.0, seed=0):
        self.n_stacks = int(n_stacks)
        self.main_blocks = int(main_blocks)
        super().__init__(data_dim, d_model, n_heads, ff_width, p_drop, c,
                         l_x, l_token, l_y, stride, seed)

    def _build(self, rng):
        # stack s runs on the tail ceil(L_x / 2^s) rows with one fewer block
        self.stacks = []
        for s in range(self.n_stacks):
            blocks = [
                (EncoderBlock(self.d_model, self.cfg.n_heads, self.ff_width, rng),
                 DistillWeights(self.d_model, rng))
                for _ in range(max(1, self.main_blocks - s))
            ]
            self.stacks.append(blocks)
        self.decoder = [DecoderLayer(self.d_model, self.cfg.n_heads,
                                     self.ff_width, rng) for _ in range(2)]

    def params(self):
        out = []
        for blocks in self.stacks:
            for block, dw in blocks:
                out += block.params() + dw.params()
        return out + self._shared_params()

    def _config_vector(self):
        return [self.data_dim, self.d_model, self.cfg.n_heads, self.ff_width,
                self.p_drop, self.cfg.c, self.l_x, self.l_token, self.l_y,
                self.n_stacks, self.main_blocks, self.stride]

    @classmethod
    def from_records(cls, rec: dict) -> "InformerModel":
        cfg = rec["informer/config"]
        model = cls(data_dim=int(cfg[0]), d_model=int(cfg[1]),
                    n_heads=int(cfg[2]), ff_width=int(cfg[3]), p_drop=cfg[4],
                    c=cfg[5], l_x=int(cfg[6]), l_token=int(cfg[7]),
                    l_y=int(cfg[8]), n_stacks=int(cfg[9]),
                    main_blocks=int(cfg[10]), stride=cfg[11])
        model.load_records(rec)
        return model

    def _encode(self, e: Tensor, training, drop):
        parts = []
        for s, blocks in enumerate(self.stacks):
            take = _ceil_half(self.l_x, s)
            x = slice_rows(e, self.l_x - take, self.l_x) if take < self.l_x else e
            for block, dw in blocks:
                x = block.forward(x, self.cfg, "prob", self.p_drop, training, drop)
                x = distill(x, dw)
            parts.append(x)
        return concat(parts, axis=0) if len(parts) > 1 else parts[0]


class VanillaTransformer(_SeqForecaster):
    """Dense-attention baseline: 3 encoder and 3 decoder layers, dropout 0.2."""

    kind = "vanilla"
    attention_mode = "full"
    use_distill = False

    def __init__(self, data_dim, d_model=64, n_heads=4, ff_width=128,
                 p_drop=0.2, l_x=96, l_token=48, l_y=45, stride=2.0, seed=0):
        super().__init__(data_dim, d_model, n_heads, ff_width, p_drop, 5.0,
                         l_x, l_token, l_y, stride, seed)

    def _build(self, rng):
        self.enc_layers = [EncoderBlock(self.d_model, self.cfg.n_heads,
                                        self.ff_width, rng) for _ in range(3)]
        self.decoder = [DecoderLayer(self.d_model, self.cfg.n_heads,
                                     self.ff_width, rng) for _ in range(3)]

    def params(self):
        out = []
        for block in self.enc_layers:
            out += block.params()
        return out + self._shared_params()

    def _config_vector(self):
        return [self.data_dim, self.d_model, self.cfg.n_heads, self.ff_width,
                self.p_drop, self.l_x, self.l_token, self.l_y, self.stride]

    @classmethod
    def from_records(cls, rec: dict) -> "VanillaTransformer":
        cfg = rec["vanilla/config"]
        model = cls(data_dim=int(cfg[0]), d_model=int(cfg[1]),
                    n_heads=int(cfg[2]), ff_width=int(cfg[3]), p_drop=cfg[4],
                    l_x=int(cfg[5]), l_token=int(cfg[6]), l_y=int(cfg[7]),
                    stride=cfg[8])
        model.load_records(rec)
        return model

    def _encode(self, e: Tensor, training, drop):
        x = e
        for block in self.enc_layers:
            x = block.forward(x, self.cfg, "full", self.p_drop, training, drop)
        return x


def informer_forward(model, x_enc, x_token, enc_timestamps, target_timestamps,
                     training=False, drop_rng=None):
    return model.forward(x_enc, x_token, enc_timestamps, target_timestamps,
                         training=training, drop_rng=drop_rng)


def gaussian_nll(mean: Tensor, log_var: Tensor, target) -> Tensor:
    """Sum over positions and dims of 0.5 (log 2pi + log_var + (t-m)^2/var)."""
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if tuple(target.shape) != tuple(mean.shape):
        raise ContractError(f"target shape {target.shape} != mean {mean.shape}")
    resid = sub(constant(target), mean)
    sq_over_var = mul(mul(resid, resid), exp(scale(log_var, -1.0)))
    inner = add(log_var, sq_over_var)
    n = float(np.prod(target.shape))
    return scale(add(tsum(inner), n * LOG_TWO_PI), 0.5)


def sample_paths(mean, log_var, n_samples: int, rng: np.random.Generator,
                 timestamps=None) -> ForecastEnsemble:
    """Draw independent Gaussian paths mean + exp(log_var/2) * z.

    Output stays in the caller's (normalized) space; denormalization is the
    caller's responsibility.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    mean = np.asarray(mean.data if isinstance(mean, Tensor) else mean)
    log_var = np.asarray(log_var.data if isinstance(log_var, Tensor) else log_var)
    z = rng.standard_normal((n_samples,) + mean.shape)
    samples = mean[None] + np.exp(0.5 * log_var)[None] * z
    return ForecastEnsemble(samples=samples, timestamps=timestamps,
                            denormalized=False)


def _panel_arrays(panel_or_values, stride):
    if hasattr(panel_or_values, "values") and hasattr(panel_or_values, "split_index"):
        p = panel_or_values
        vals = np.asarray(p.values[:p.split_index], dtype=np.float64)
        ts = np.asarray(p.timestamps[:p.split_index], dtype=np.float64)
        return vals, ts
    vals = np.atleast_2d(np.asarray(panel_or_values, dtype=np.float64))
    return vals, np.arange(vals.shape[0], dtype=np.float64) * stride


def _window_nll(model, values, timestamps, start, training, drop_rng):
    ctx = values[start:start + model.l_x]
    target = values[start + model.l_x:start + model.l_x + model.l_y]
    ctx_n, stats = normalize_window(ctx)
    target_n = stats.normalize(target)
    token = ctx_n[-model.l_token:]
    mean, log_var = model.forward(
        ctx_n, token, timestamps[start:start + model.l_x],
        timestamps[start + model.l_x:start + model.l_x + model.l_y],
        training=training, drop_rng=drop_rng)
    return gaussian_nll(mean, log_var, target_n)


def train_model(model, panel_or_values, epochs: int, seed: int,
                lr: float = 1e-4, windows_per_epoch: int = 64,
                opt: AdamW | None = None, val_fraction: float = 0.1,
                start_epoch: int = 0, on_epoch=None):
    """Window-sampled NLL training shared by both transformer models.

    Context windows are normalized by their own statistics; the adjacent
    target window shares those statistics.  A tail slice of the training
    span is held out for per-epoch validation so the train/validation gap
    (the overfitting indicator) can be reported.  Returns (history, opt).
    """
    values, timestamps = _panel_arrays(panel_or_values, model.stride)
    total = model.l_x + model.l_y
    if values.shape[0] < total:
        raise ParameterError(
            f"training span {values.shape[0]} shorter than context+target {total}")
    if opt is None:
        opt = AdamW(model.params(), lr=lr)
    val_span = int(val_fraction * values.shape[0])
    val_starts = []
    train_hi = values.shape[0]
    if val_span >= total and values.shape[0] - val_span >= total:
        val_lo = values.shape[0] - val_span
        step = max(1, (val_span - total) // 4 + 1)
        val_starts = list(range(val_lo, values.shape[0] - total + 1, step))[:5]
        train_hi = val_lo
    history = TrainHistory([], [])
    for e in range(start_epoch, start_epoch + epochs):
        rng = rng_mod.stream(seed, rng_mod.TRAIN, e)
        drop_rng = rng_mod.stream(seed, rng_mod.DROPOUT, e)
        epoch_losses = []
        for w in range(windows_per_epoch):
            start = int(rng.integers(0, train_hi - total + 1))
            loss = _window_nll(model, values, timestamps, start, True,
                               drop_rng)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingError(
                    f"non-finite loss at epoch={e} window={w} start={start}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_losses.append(val)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        with no_grad():
            vals = [_window_nll(model, values, timestamps, s, False,
                                None).item() for s in val_starts]
        val_loss = float(np.mean(vals)) if vals else float("nan")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if on_epoch is not None:
            on_epoch(e, train_loss, val_loss)
    return history, opt


def train_informer(model: InformerModel, panel_or_values, epochs: int,
                   seed: int, **kw):
    return train_model(model, panel_or_values, epochs, seed, **kw)


def train_vanilla(model: VanillaTransformer, panel_or_values, epochs: int,
                  seed: int, **kw):
    return train_model(model, panel_or_values, epochs, seed, **kw)


def forecast(model, context, context_timestamps, target_timestamps,
             n_samples: int, seed: int) -> ForecastEnsemble:
    """Normalize the context, run one generative pass, sample the Gaussian
    head, and map the ensemble back to the original scale."""
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    if context.shape[0] != model.l_x:
        raise ParameterError(f"context must supply exactly {model.l_x} rows")
    ctx_n, stats = normalize_window(context)
    token = ctx_n[-model.l_token:]
    with no_grad():
        mean, log_var = model.forward(ctx_n, token, context_timestamps,
                                      target_timestamps, training=False)
    ens = sample_paths(mean, log_var, n_samples,
                       rng_mod.stream(seed, rng_mod.PATH),
                       timestamps=target_timestamps)
    return ForecastEnsemble(samples=stats.denormalize(ens.samples),
                            timestamps=ens.timestamps, denormalized=True)
