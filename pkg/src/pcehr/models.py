"""Forecasting architectures.

The main model conditions an LSTM on a per-person embedding: a convolutional
snippet encoder turns each sensor window into a feature vector, a second
convolutional encoder compresses the initialization snippets' features plus
their known HR into one embedding, and two linear maps turn that embedding
into the LSTM's initial hidden and cell states.  A small feed-forward decoder
reads one HR value per prediction snippet off the hidden states.  Variants:
a PPG flavor with a second spectral encoder branch, an ablation where the
LSTM absorbs initialization HR through an extra input channel instead of the
embedding, and two baselines (recursive feed-forward, conv+LSTM per-sample
stack).

All forward passes take a SegmentBatch (numpy arrays plus the HR population
statistics) and return predictions in beats/minute; losses are computed on
the de-normalized scale.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv1d, Dropout, Linear, LstmCell, ParameterStore

MODEL_KINDS = ("pce-lstm", "pce-lstm-ppg", "lstm-self-encode", "ffnn", "deepconvlstm")


@dataclass
class ModelConfig:
    kind: str = "pce-lstm"
    in_channels: int = 6          # sensor rows in the snippet matrix (incl. PPG row for the ppg task)
    ts_len: int = 128             # samples per snippet (tau * rate)
    n_snippets: int = 50
    init_len: int = 12
    tse_filters: int = 16
    tse_out: int = 128
    dropout: float = 0.15
    pce_filters: int = 64
    pce_out: int = 64
    lstm_hidden: int = 64
    fft_len: int = 128            # PPG task: spectrum length fed to the FFT branch
    fft_out: int = 12
    ffnn_width: int = 16
    ffnn_hidden_layers: int = 3
    dcl_filters: int = 64
    dcl_kernel: int = 5
    dcl_conv_layers: int = 4
    dcl_lstm_hidden: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def halving_plan(length: int):
    """Conv layer settings that halve a time dimension down to 1.

    Even lengths use kernel 3 / stride 2 / padding 1; odd lengths drop the
    padding; length 2 finishes with kernel 2 / stride 1.  The number of
    layers equals floor(log2(length)).
    """
    if length < 2:
        raise ValueError(f"encoder input length must be >= 2, got {length}")
    plan = []
    current = length
    while current > 1:
        if current == 2:
            k, s, p = 2, 1, 0
        elif current % 2 == 0:
            k, s, p = 3, 2, 1
        else:
            k, s, p = 3, 2, 0
        out_len = (current + 2 * p - k) // s + 1
        plan.append((k, s, p, out_len))
        current = out_len
    return plan


class ConvStack:
    """Halving conv encoder: each layer is conv -> leaky_relu -> dropout;
    intermediate layers carry `filters` channels, the last `out_filters`.
    Output time length is 1, squeezed away."""

    def __init__(self, store, name, in_channels, length, filters, out_filters, dropout_rate, rng, dtype):
        plan = halving_plan(length)
        self.convs = []
        channels = in_channels
        for i, (k, s, p, _) in enumerate(plan):
            f = out_filters if i == len(plan) - 1 else filters
            self.convs.append(Conv1d(store, f"{name}.layer{i + 1}", channels, f, k, stride=s, padding=p, rng=rng, dtype=dtype))
            channels = f
        self.out_filters = out_filters
        self.dropout = Dropout(dropout_rate)

    @property
    def n_layers(self):
        return len(self.convs)

    def __call__(self, x: Tensor, train_mode: bool, rng) -> Tensor:
        for conv in self.convs:
            x = self.dropout(ad.leaky_relu(conv(x)), train_mode, rng)
        if x.shape[-1] != 1:
            raise ad.AutodiffError(f"encoder did not collapse time dimension: {x.shape}")
        return ad.reshape(x, x.shape[:-1])


class Decoder:
    """Hidden state -> scalar HR (normalized scale): H->32->32->1 with ReLU
    after the first two layers."""

    def __init__(self, store, name, in_dim, rng, dtype):
        self.fc1 = Linear(store, f"{name}.fc1", in_dim, 32, rng, dtype)
        self.fc2 = Linear(store, f"{name}.fc2", 32, 32, rng, dtype)
        self.fc3 = Linear(store, f"{name}.fc3", 32, 1, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc3(ad.relu(self.fc2(ad.relu(self.fc1(h)))))


@dataclass
class SegmentBatch:
    """Batched segments ready for a model: raw normalized sensors, HR truth
    in beats/minute (NaN where unknown), and the HR normalization stats."""

    sensors: np.ndarray                 # (B, N, C, L)
    hr_bpm: np.ndarray                  # (B, N)
    hr_mean: float
    hr_std: float
    fft: np.ndarray | None = None       # (B, N, fft_len) for the PPG task

    @classmethod
    def from_segments(cls, segments, hr_mean, hr_std, with_fft=False):
        sensors = np.stack([seg.sensor_array() for seg in segments])
        hr = np.stack([seg.hr_array() for seg in segments])
        fft = np.stack([seg.fft_array() for seg in segments]) if with_fft else None
        return cls(sensors, hr, float(hr_mean), float(hr_std), fft)

    @property
    def size(self):
        return self.sensors.shape[0]

    def hr_norm(self) -> np.ndarray:
        return (self.hr_bpm - self.hr_mean) / self.hr_std


@dataclass
class PredictionOutput:
    hr_pred: Tensor                 # (B, n_predictions) in beats/minute
    pce: Tensor | None = None       # (B, pce_out) when the model produces one


def _check_init_hr(batch: SegmentBatch, init_len: int):
    init = batch.hr_bpm[:, :init_len]
    if not np.all(np.isfinite(init)):
        raise ValueError("initialization snippets are missing HR truth")


def _denorm(pred_norm: Tensor, batch: SegmentBatch) -> Tensor:
    return pred_norm * batch.hr_std + batch.hr_mean


class PceLstm:
    """Embedding-conditioned LSTM forecaster (the primary model)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c = config
        self.tse = ConvStack(self.store, "tse", c.in_channels, c.ts_len, c.tse_filters, c.tse_out, c.dropout, rng, dtype)
        self.pce = ConvStack(self.store, "pce", c.tse_out + 1, c.init_len, c.pce_filters, c.pce_out, c.dropout, rng, dtype)
        self.fc_h = Linear(self.store, "fc_h", c.pce_out, c.lstm_hidden, rng, dtype)
        self.fc_c = Linear(self.store, "fc_c", c.pce_out, c.lstm_hidden, rng, dtype)
        self.lstm = LstmCell(self.store, "lstm", c.tse_out, c.lstm_hidden, rng, dtype)
        self.decoder = Decoder(self.store, "decoder", c.lstm_hidden, rng, dtype)

    def _encode_snippets(self, sensors: np.ndarray, train_mode, rng) -> Tensor:
        """(B, T, C, L) -> (B, T, tse_out) feature sequence."""
        b, t, ch, length = sensors.shape
        x = Tensor(sensors.reshape(b * t, ch, length).astype(self.dtype))
        feats = self.tse(x, train_mode, rng)
        return ad.reshape(feats, (b, t, self.config.tse_out))

    def _pce_from_features(self, init_feats: Tensor, hr_norm_init: np.ndarray, train_mode, rng) -> Tensor:
        """init_feats (B, I, F), hr row appended along the feature axis."""
        stacked = ad.transpose(init_feats, (0, 2, 1))                       # (B, F, I)
        hr_row = Tensor(hr_norm_init[:, None, :].astype(self.dtype))       # (B, 1, I)
        pce_in = ad.concat([stacked, hr_row], axis=1)
        if not np.all(np.isfinite(pce_in.data)):
            raise ad.NonFiniteError("non-finite input to the embedding encoder")
        return self.pce(pce_in, train_mode, rng)

    def encode_pce(self, batch: SegmentBatch, train_mode=False, rng=None) -> Tensor:
        """Embedding of a batch's initialization snippets only (used for
        discriminator partner segments)."""
        _check_init_hr(batch, self.config.init_len)
        i = self.config.init_len
        feats = self._encode_snippets(batch.sensors[:, :i], train_mode, rng)
        return self._pce_from_features(feats, batch.hr_norm()[:, :i], train_mode, rng)

    def forward(self, batch: SegmentBatch, train_mode=False, rng=None) -> PredictionOutput:
        c = self.config
        _check_init_hr(batch, c.init_len)
        b, n = batch.sensors.shape[:2]
        feats = self._encode_snippets(batch.sensors, train_mode, rng)
        init_feats = feats[:, : c.init_len, :]
        pce = self._pce_from_features(init_feats, batch.hr_norm()[:, : c.init_len], train_mode, rng)
        h = self.fc_h(pce)
        cell = self.fc_c(pce)
        preds = []
        for t in range(c.init_len, n):
            h, cell = self.lstm(feats[:, t, :], h, cell)
            preds.append(self.decoder(h))
        pred_norm = ad.concat(preds, axis=1)
        return PredictionOutput(_denorm(pred_norm, batch), pce)


class PceLstmPpg:
    """PPG-task variant: a second encoder branch consumes each snippet's
    magnitude spectrum; the concatenated features feed the embedding encoder
    (without an HR row) and the LSTM."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c = config
        self.feature_width = c.tse_out + c.fft_out
        self.tse_raw = ConvStack(self.store, "tse_raw", c.in_channels, c.ts_len, c.tse_filters, c.tse_out, c.dropout, rng, dtype)
        self.tse_fft = ConvStack(self.store, "tse_fft", 1, c.fft_len, c.tse_filters, c.fft_out, c.dropout, rng, dtype)
        self.pce = ConvStack(self.store, "pce", self.feature_width, c.init_len, c.pce_filters, c.pce_out, c.dropout, rng, dtype)
        self.fc_h = Linear(self.store, "fc_h", c.pce_out, c.lstm_hidden, rng, dtype)
        self.fc_c = Linear(self.store, "fc_c", c.pce_out, c.lstm_hidden, rng, dtype)
        self.lstm = LstmCell(self.store, "lstm", self.feature_width, c.lstm_hidden, rng, dtype)
        self.decoder = Decoder(self.store, "decoder", c.lstm_hidden, rng, dtype)

    def _encode_snippets(self, batch: SegmentBatch, train_mode, rng) -> Tensor:
        c = self.config
        b, n, ch, length = batch.sensors.shape
        raw = self.tse_raw(Tensor(batch.sensors.reshape(b * n, ch, length).astype(self.dtype)), train_mode, rng)
        fft_in = Tensor(batch.fft.reshape(b * n, 1, c.fft_len).astype(self.dtype))
        spectral = self.tse_fft(fft_in, train_mode, rng)
        feats = ad.concat([raw, spectral], axis=1)
        return ad.reshape(feats, (b, n, self.feature_width))

    def forward(self, batch: SegmentBatch, train_mode=False, rng=None) -> PredictionOutput:
        c = self.config
        if batch.fft is None:
            raise ValueError("PPG task requires per-snippet spectra (preprocess with the FFT branch enabled)")
        b, n = batch.sensors.shape[:2]
        feats = self._encode_snippets(batch, train_mode, rng)
        init = ad.transpose(feats[:, : c.init_len, :], (0, 2, 1))          # (B, W, I), no HR row
        if not np.all(np.isfinite(init.data)):
            raise ad.NonFiniteError("non-finite input to the embedding encoder")
        pce = self.pce(init, train_mode, rng)
        h = self.fc_h(pce)
        cell = self.fc_c(pce)
        preds = []
        for t in range(c.init_len, n):
            h, cell = self.lstm(feats[:, t, :], h, cell)
            preds.append(self.decoder(h))
        return PredictionOutput(_denorm(ad.concat(preds, axis=1), batch), pce)

    def encode_pce(self, batch: SegmentBatch, train_mode=False, rng=None) -> Tensor:
        c = self.config
        if batch.fft is None:
            raise ValueError("PPG task requires per-snippet spectra")
        i = c.init_len
        sub = SegmentBatch(batch.sensors[:, :i], batch.hr_bpm[:, :i], batch.hr_mean, batch.hr_std, batch.fft[:, :i])
        feats = self._encode_snippets(sub, train_mode, rng)
        init = ad.transpose(feats, (0, 2, 1))
        return self.pce(init, train_mode, rng)


class LstmSelfEncode:
    """Ablation: no embedding encoder.  The LSTM starts from zero states and
    sees the known HR as one extra constant-per-snippet input channel, zeroed
    during the prediction part; it runs over all snippets and predictions are
    read from the last n - init_len steps."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c = config
        self.tse = ConvStack(self.store, "tse", c.in_channels + 1, c.ts_len, c.tse_filters, c.tse_out, c.dropout, rng, dtype)
        self.lstm = LstmCell(self.store, "lstm", c.tse_out, c.lstm_hidden, rng, dtype)
        self.decoder = Decoder(self.store, "decoder", c.lstm_hidden, rng, dtype)

    def forward(self, batch: SegmentBatch, train_mode=False, rng=None) -> PredictionOutput:
        c = self.config
        _check_init_hr(batch, c.init_len)
        b, n, ch, length = batch.sensors.shape
        hr_channel = np.zeros((b, n, 1, length), dtype=self.dtype)
        hr_norm = batch.hr_norm()
        hr_channel[:, : c.init_len, 0, :] = hr_norm[:, : c.init_len, None]
        with_hr = np.concatenate([batch.sensors.astype(self.dtype), hr_channel], axis=2)
        x = Tensor(with_hr.reshape(b * n, ch + 1, length))
        feats = ad.reshape(self.tse(x, train_mode, rng), (b, n, c.tse_out))
        h = Tensor(np.zeros((b, c.lstm_hidden), dtype=self.dtype))
        cell = Tensor(np.zeros((b, c.lstm_hidden), dtype=self.dtype))
        preds = []
        for t in range(n):
            h, cell = self.lstm(feats[:, t, :], h, cell)
            if t >= c.init_len:
                preds.append(self.decoder(h))
        return PredictionOutput(_denorm(ad.concat(preds, axis=1), batch), None)


class Ffnn:
    """Recursive feed-forward baseline: per-sensor window means plus the
    previous HR predict the next HR; the input vector also skips into every
    hidden layer.  Multi-step prediction feeds each output back in as the
    next step's previous HR (truth is used while inside the initialization
    part), and training runs through the same recursion."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c = config
        in_dim = c.in_channels + 1
        self.hidden = []
        width = c.ffnn_width
        prev = in_dim
        for i in range(c.ffnn_hidden_layers):
            self.hidden.append(Linear(self.store, f"hidden{i + 1}", prev, width, rng, dtype))
            prev = width + in_dim  # skip connection widens every later layer
        self.out = Linear(self.store, "out", width, 1, rng, dtype)

    def _step(self, features: Tensor) -> Tensor:
        x = features
        h = ad.relu(self.hidden[0](x))
        for layer in self.hidden[1:]:
            h = ad.relu(layer(ad.concat([h, x], axis=1)))
        return self.out(h)

    def forward(self, batch: SegmentBatch, train_mode=False, rng=None) -> PredictionOutput:
        c = self.config
        _check_init_hr(batch, c.init_len)
        b, n = batch.sensors.shape[:2]
        means = batch.sensors.mean(axis=3).astype(self.dtype)      # (B, N, C)
        hr_norm = batch.hr_norm()
        prev: Tensor | None = None
        preds = []
        for t in range(c.init_len, n):
            if t == c.init_len or t - 1 < c.init_len:
                prev = Tensor(hr_norm[:, t - 1 : t].astype(self.dtype))
            features = ad.concat([Tensor(means[:, t]), prev], axis=1)
            prev = self._step(features)
            preds.append(prev)
        return PredictionOutput(_denorm(ad.concat(preds, axis=1), batch), None)


class DeepConvLstm:
    """Conv+LSTM per-sample baseline at its own pipeline settings (30 Hz,
    3 s snippets): four kernel-5 valid convolutions shared across channels,
    then a two-layer LSTM over every conv time step of the whole segment;
    one HR readout per snippet at the snippet's last step.  HR enters as an
    extra channel, zeroed outside the initialization part."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c = config
        self.convs = [Conv1d(self.store, "conv1", 1, c.dcl_filters, c.dcl_kernel, rng=rng, dtype=dtype)]
        for i in range(1, c.dcl_conv_layers):
            self.convs.append(Conv1d(self.store, f"conv{i + 1}", c.dcl_filters, c.dcl_filters, c.dcl_kernel, rng=rng, dtype=dtype))
        self.conv_out_len = c.ts_len - c.dcl_conv_layers * (c.dcl_kernel - 1)
        if self.conv_out_len < 1:
            raise ValueError("snippet too short for the convolution stack")
        lstm_in = (c.in_channels + 1) * c.dcl_filters
        self.lstm1 = LstmCell(self.store, "lstm1", lstm_in, c.dcl_lstm_hidden, rng, dtype)
        self.lstm2 = LstmCell(self.store, "lstm2", c.dcl_lstm_hidden, c.dcl_lstm_hidden, rng, dtype)
        self.head = Linear(self.store, "head", c.dcl_lstm_hidden, 1, rng, dtype)

    def forward(self, batch: SegmentBatch, train_mode=False, rng=None) -> PredictionOutput:
        c = self.config
        _check_init_hr(batch, c.init_len)
        b, n, ch, length = batch.sensors.shape
        hr_channel = np.zeros((b, n, 1, length), dtype=self.dtype)
        hr_channel[:, : c.init_len, 0, :] = batch.hr_norm()[:, : c.init_len, None]
        with_hr = np.concatenate([batch.sensors.astype(self.dtype), hr_channel], axis=2)
        n_ch = ch + 1
        x = Tensor(with_hr.reshape(b * n * n_ch, 1, length))
        for conv in self.convs:
            x = ad.relu(conv(x))
        t_out = self.conv_out_len
        feats = ad.reshape(x, (b, n, n_ch, c.dcl_filters, t_out))
        feats = ad.transpose(feats, (0, 1, 4, 2, 3))                 # (B, N, T, Ch, F)
        feats = ad.reshape(feats, (b, n, t_out, n_ch * c.dcl_filters))
        h1 = Tensor(np.zeros((b, c.dcl_lstm_hidden), dtype=self.dtype))
        c1 = Tensor(np.zeros((b, c.dcl_lstm_hidden), dtype=self.dtype))
        h2 = Tensor(np.zeros((b, c.dcl_lstm_hidden), dtype=self.dtype))
        c2 = Tensor(np.zeros((b, c.dcl_lstm_hidden), dtype=self.dtype))
        preds = []
        for t in range(n):
            for s in range(t_out):
                h1, c1 = self.lstm1(feats[:, t, s, :], h1, c1)
                h2, c2 = self.lstm2(h1, h2, c2)
            if t >= c.init_len:
                preds.append(self.head(h2))
        return PredictionOutput(_denorm(ad.concat(preds, axis=1), batch), None)


class Discriminator:
    """Same-person classifier on ordered embedding pairs: five linear layers
    (2*pce_out -> 64 -> 64 -> 64 -> 64 -> 1), ReLU + dropout after the first
    four, sigmoid on the last.  Owns its own parameter store so the
    forecaster's parameter count stays separate."""

    def __init__(self, pce_out: int = 64, seed: int = 0, dropout: float = 0.15, dtype=np.float32):
        self.store = ParameterStore(rng_seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        widths = [2 * pce_out, 64, 64, 64, 64]
        self.layers = [
            Linear(self.store, f"fc{i + 1}", widths[i], widths[i + 1], rng, dtype) for i in range(4)
        ]
        self.final = Linear(self.store, "fc5", 64, 1, rng, dtype)
        self.dropout = Dropout(dropout)

    def forward(self, pce_a: Tensor, pce_b: Tensor, train_mode=False, rng=None) -> Tensor:
        x = ad.concat([pce_a, pce_b], axis=1)
        for layer in self.layers:
            x = self.dropout(ad.relu(layer(x)), train_mode, rng)
        logits = self.final(x)
        return ad.reshape(ad.sigmoid(logits), (logits.shape[0],))


# ---------------------------------------------------------------------------
# losses and factory


def hr_l1_loss(output: PredictionOutput, batch: SegmentBatch) -> Tensor:
    """Mean absolute error in beats/minute over the prediction snippets."""
    n_pred = output.hr_pred.shape[1]
    truth = batch.hr_bpm[:, -n_pred:]
    if not np.all(np.isfinite(truth)):
        raise ValueError("prediction snippets are missing HR truth for the loss")
    return ad.l1_loss(output.hr_pred, Tensor(truth.astype(output.hr_pred.dtype)))


def total_loss(l_hr: Tensor, l_disc: Tensor | None, weights=(0.9, 0.1)) -> Tensor:
    """Weighted objective; with no discrimination term the objective is the
    plain HR loss."""
    if l_disc is None:
        return l_hr
    if weights[1] == 0.0:
        return l_hr if weights[0] == 1.0 else l_hr * weights[0]
    return l_hr * weights[0] + l_disc * weights[1]


def discriminator_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct at the 0.5 probability threshold."""
    return float(np.mean((probs > 0.5).astype(int) == labels))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32):
    if config.kind == "pce-lstm":
        return PceLstm(config, seed, dtype)
    if config.kind == "pce-lstm-ppg":
        return PceLstmPpg(config, seed, dtype)
    if config.kind == "lstm-self-encode":
        return LstmSelfEncode(config, seed, dtype)
    if config.kind == "ffnn":
        return Ffnn(config, seed, dtype)
    if config.kind == "deepconvlstm":
        return DeepConvLstm(config, seed, dtype)
    raise ValueError(f"unknown model kind {config.kind!r}; choose from {MODEL_KINDS}")
