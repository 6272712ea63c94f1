"""Geolocation-aware LID network.

A conv waveform frontend feeds an N-layer transformer encoder. Selected
intermediate hidden states are pooled into per-layer embeddings whose
geolocation predictions are detached, linearly projected, and added back
to every frame before the next layer. The weighted sum of all hidden
states goes through an ECAPA-lite extractor, attentive statistics pooling,
and a batchnorm+linear projector; classification uses sub-center additive
angular margin softmax, and a linear head regresses the geolocation vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ParameterSet, ShapeError

VALID_MODES = ("baseline", "geo-pred", "geo-cond")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: tuple = (64, 64, 64, 64)
    conv_kernels: tuple = (10, 8, 6, 4)
    conv_strides: tuple = (5, 4, 4, 2)
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    max_frames: int = 1000

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ConfigError("frontend conv spec lists must have equal length")


@dataclass(frozen=True)
class CondConfig:
    layers: tuple = ()
    share: str = "shared"        # or "independent"
    freeze: str = "trainable"    # or "frozen"
    enabled: bool = False

    def __post_init__(self):
        if self.share not in ("shared", "independent"):
            raise ConfigError(f"share must be shared|independent, got {self.share!r}")
        if self.freeze not in ("frozen", "trainable"):
            raise ConfigError(f"freeze must be frozen|trainable, got {self.freeze!r}")
        object.__setattr__(self, "layers", tuple(sorted(set(self.layers))))

    def effective_layers(self, num_encoder_layers: int) -> tuple:
        if not self.enabled:
            return ()
        bad = [n for n in self.layers if not (0 <= n < num_encoder_layers)]
        if bad:
            raise ConfigError(f"conditioning layers {bad} outside "
                              f"[0, {num_encoder_layers})")
        return self.layers


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 64           # ECAPA channel size C
    embed_dim: int = 32          # embedding size E
    num_classes: int = 12
    geo_dim: int = 64            # lattice count
    subcenters: int = 3
    margin: float = 0.5
    scale: float = 30.0

    def __post_init__(self):
        for name in ("channels", "embed_dim", "num_classes", "geo_dim", "subcenters"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.margin < math.pi / 2):
            raise ConfigError(f"margin {self.margin} outside [0, pi/2)")
        if self.channels % 4 != 0:
            raise ConfigError("channels must be divisible by the Res2 split of 4")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    gamma: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError(f"gamma {self.gamma} outside [0, 1]")


@dataclass
class ForwardTrace:
    hidden: list            # Z^0 .. Z^N (pre-injection)
    conditioned: dict       # n -> conditioned hidden state
    cond_signals: dict      # n -> c^n
    z_out: Tensor = None
    pooled: Tensor = None
    embedding: Tensor = None
    logits: Tensor = None
    geo_pred: Tensor = None
    inter_embeddings: dict = field(default_factory=dict)
    inter_geo_preds: dict = field(default_factory=dict)
    loss_class: Tensor = None
    loss_geo: Tensor = None
    inter_geo_losses: dict = field(default_factory=dict)
    loss_total: Tensor = None


# ---------------------------------------------------------------------------
# losses

def loss_l1(loss_class: Tensor, loss_geo: Tensor, lam: float) -> Tensor:
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda {lam} outside [0, 1]")
    return ad.add(ad.scale(loss_class, 1.0 - lam), ad.scale(loss_geo, lam))


def loss_l2(loss_class: Tensor, loss_geo: Tensor, inter_losses, lam: float,
            gamma: float) -> Tensor:
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda {lam} outside [0, 1]")
    if not (0.0 <= gamma <= 1.0):
        raise ConfigError(f"gamma {gamma} outside [0, 1]")
    inter_losses = list(inter_losses)
    if any(l is None for l in inter_losses):
        raise ConfigError("missing intermediate geolocation loss")
    if not inter_losses:
        # no intermediate supervision selected: identical to the single-level loss
        return loss_l1(loss_class, loss_geo, lam)
    acc = inter_losses[0]
    for l in inter_losses[1:]:
        acc = ad.add(acc, l)
    inter = ad.scale(acc, 1.0 / len(inter_losses))
    geo_term = ad.add(ad.scale(loss_geo, 1.0 - gamma), ad.scale(inter, gamma))
    return ad.add(ad.scale(loss_class, 1.0 - lam), ad.scale(geo_term, lam))


def mse(pred: Tensor, target) -> Tensor:
    target = ad.as_tensor(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: shapes {pred.shape} vs {target.shape}")
    d = ad.sub(pred, target)
    return ad.mean(ad.mul(d, d))


def geo_mse(pred: Tensor, target) -> Tensor:
    """Squared error summed over lattice dimensions, averaged over the batch.

    Summing (rather than averaging) over the lattice axis keeps the
    geolocation term comparable in magnitude to the classification loss, so
    the mixing weight actually trades the two objectives off.
    """
    return ad.scale(mse(pred, target), float(pred.shape[-1]))


# ---------------------------------------------------------------------------
# model

class LIDModel:
    """All parameters plus the forward graph builders."""

    POOL_EPS = 1e-8
    NORM_EPS = 1e-12
    COS_CLIP = 1e-7
    COND_INIT_SCALE = 0.01

    def __init__(self, enc: EncoderConfig, cond: CondConfig, head: HeadConfig,
                 mode: str = "baseline", seed: int = 0, dtype=np.float32,
                 labels: tuple = ()):
        if mode not in VALID_MODES:
            raise ConfigError(f"mode must be one of {VALID_MODES}, got {mode!r}")
        if labels and len(labels) != head.num_classes:
            raise ConfigError(f"{len(labels)} labels but num_classes = {head.num_classes}")
        self.enc = enc
        self.cond = cond
        self.head = head
        self.mode = mode
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.labels = tuple(labels)
        self.cond_layers = cond.effective_layers(enc.num_layers) if mode == "geo-cond" else ()
        self.params = ParameterSet()
        self._build(np.random.default_rng(seed))

    # -- parameter construction --------------------------------------------

    def _uniform(self, rng, shape, fan_in, scale=1.0):
        bound = scale / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def _add_linear(self, rng, name, fan_in, fan_out, trainable=True, scale=1.0):
        self.params.add(f"{name}.weight",
                        self._uniform(rng, (fan_in, fan_out), fan_in, scale),
                        trainable=trainable)
        self.params.add(f"{name}.bias",
                        self._uniform(rng, (fan_out,), fan_in, scale),
                        trainable=trainable)

    def _add_conv(self, rng, name, cin, cout, k):
        fan = cin * k
        self.params.add(f"{name}.weight", self._uniform(rng, (cout, cin, k), fan))
        self.params.add(f"{name}.bias", self._uniform(rng, (cout,), fan))

    def _add_layernorm(self, name, dim):
        self.params.add(f"{name}.gamma", np.ones(dim, dtype=self.dtype))
        self.params.add(f"{name}.beta", np.zeros(dim, dtype=self.dtype))

    def _add_batchnorm(self, name, dim):
        self.params.add(f"{name}.gamma", np.ones(dim, dtype=self.dtype))
        self.params.add(f"{name}.beta", np.zeros(dim, dtype=self.dtype))
        self.params.add(f"{name}.running_mean", np.zeros(dim, dtype=self.dtype),
                        trainable=False)
        self.params.add(f"{name}.running_var", np.ones(dim, dtype=self.dtype),
                        trainable=False)

    def _add_pool_projector(self, rng, prefix, in_dim):
        att = max(4, in_dim // 4)
        self._add_linear(rng, f"{prefix}.pool.att1", in_dim, att)
        self._add_linear(rng, f"{prefix}.pool.att2", att, 1)
        self._add_batchnorm(f"{prefix}.proj.bn", 2 * in_dim)
        self._add_linear(rng, f"{prefix}.proj.linear", 2 * in_dim, self.head.embed_dim)

    def _build(self, rng):
        enc, head = self.enc, self.head
        cin = 1
        for i, (c, k, _s) in enumerate(zip(enc.conv_channels, enc.conv_kernels,
                                           enc.conv_strides)):
            self._add_conv(rng, f"frontend.conv{i}", cin, c, k)
            cin = c
        self._add_linear(rng, "input_proj", enc.conv_channels[-1], enc.hidden_dim)
        d = enc.hidden_dim
        for n in range(enc.num_layers):
            p = f"enc{n}"
            self._add_layernorm(f"{p}.ln1", d)
            for part in ("q", "k", "v", "o"):
                self._add_linear(rng, f"{p}.attn.{part}", d, d)
            self._add_layernorm(f"{p}.ln2", d)
            self._add_linear(rng, f"{p}.ff.w1", d, enc.ff_dim)
            self._add_linear(rng, f"{p}.ff.w2", enc.ff_dim, d)
        self.params.add("agg.logits",
                        np.zeros(enc.num_layers + 1, dtype=self.dtype))

        c = head.channels
        self._add_conv(rng, "ecapa.front", d, c, 5)
        split = c // 4
        for j, _dil in enumerate((1, 2, 3)):
            p = f"ecapa.block{j}"
            self._add_conv(rng, f"{p}.conv_in", c, c, 1)
            for m in range(1, 4):
                self._add_conv(rng, f"{p}.res2.{m}", split, split, 3)
            self._add_conv(rng, f"{p}.conv_out", c, c, 1)
            se = max(1, c // 4)
            self._add_linear(rng, f"{p}.se.fc1", c, se)
            self._add_linear(rng, f"{p}.se.fc2", se, c)
        self._add_conv(rng, "ecapa.cat_proj", 3 * c, c, 1)
        self._add_layernorm("ecapa.ln", c)

        self._add_pool_projector(rng, "down", c)
        self.params.add("classifier.weight",
                        self._uniform(rng, (head.num_classes * head.subcenters,
                                            head.embed_dim), head.embed_dim))

        if self.mode in ("geo-pred", "geo-cond"):
            self._add_linear(rng, "geo", head.embed_dim, head.geo_dim)
        for n in self.cond_layers:
            self._add_pool_projector(rng, f"inter{n}", d)
            self._add_linear(rng, f"inter{n}.geo", head.embed_dim, head.geo_dim)
        if self.cond_layers:
            trainable = self.cond.freeze == "trainable"
            # Small init keeps early conditioning a gentle perturbation of the
            # unconditioned forward pass while staying useful when frozen.
            if self.cond.share == "shared":
                self._add_linear(rng, "condproj.shared", head.geo_dim, d,
                                 trainable=trainable, scale=self.COND_INIT_SCALE)
            else:
                for n in self.cond_layers:
                    self._add_linear(rng, f"condproj.layer{n}", head.geo_dim, d,
                                     trainable=trainable, scale=self.COND_INIT_SCALE)

    # -- building blocks ----------------------------------------------------

    def _linear(self, x, name):
        return ad.add(ad.matmul(x, self.params[f"{name}.weight"]),
                      self.params[f"{name}.bias"])

    def _conv(self, x, name, stride=1, dilation=1, padding=0):
        return ad.conv1d(x, self.params[f"{name}.weight"],
                         self.params[f"{name}.bias"], stride=stride,
                         dilation=dilation, padding=padding)

    def min_signal_length(self) -> int:
        n = 1
        for k, s in zip(reversed(self.enc.conv_kernels), reversed(self.enc.conv_strides)):
            n = (n - 1) * s + k
        return n

    def frontend_length(self, length: int) -> int:
        t = length
        for k, s in zip(self.enc.conv_kernels, self.enc.conv_strides):
            t = (t - k) // s + 1
        return t

    def frontend(self, wave) -> Tensor:
        """Raw (B, L) signal to (B, T, D_in) frame features."""
        wave = ad.as_tensor(wave, dtype=self.dtype)
        if wave.ndim != 2:
            raise ShapeError(f"frontend: expected (B, L) signal, got {wave.shape}")
        if wave.shape[1] < self.min_signal_length():
            raise ShapeError(f"frontend: signal length {wave.shape[1]} below "
                             f"minimum {self.min_signal_length()}")
        h = ad.reshape(wave, (wave.shape[0], 1, wave.shape[1]))
        for i, (k, s) in enumerate(zip(self.enc.conv_kernels, self.enc.conv_strides)):
            h = ad.gelu(self._conv(h, f"frontend.conv{i}", stride=s))
        return ad.transpose(h, (0, 2, 1))

    def _encoder_layer(self, x, n) -> Tensor:
        p = f"enc{n}"
        d = self.enc.hidden_dim
        heads = self.enc.num_heads
        dh = d // heads
        b, t, _ = x.shape

        h = ad.layernorm(x, self.params[f"{p}.ln1.gamma"], self.params[f"{p}.ln1.beta"])
        q = ad.transpose(ad.reshape(self._linear(h, f"{p}.attn.q"), (b, t, heads, dh)),
                         (0, 2, 1, 3))
        kk = ad.transpose(ad.reshape(self._linear(h, f"{p}.attn.k"), (b, t, heads, dh)),
                          (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(self._linear(h, f"{p}.attn.v"), (b, t, heads, dh)),
                         (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, kk), 1.0 / math.sqrt(dh))
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, self._linear(ctx, f"{p}.attn.o"))

        h = ad.layernorm(x, self.params[f"{p}.ln2.gamma"], self.params[f"{p}.ln2.beta"])
        h = self._linear(ad.gelu(self._linear(h, f"{p}.ff.w1")), f"{p}.ff.w2")
        return ad.add(x, h)

    def encoder_forward(self, x: Tensor, cond_signals: dict | None = None,
                        cond_provider=None) -> ForwardTrace:
        """Run the encoder stack; conditioning injected after selected layers.

        ``cond_signals`` maps layer index -> fixed c^n; ``cond_provider`` is
        called as provider(n, Z^n) and may return None. Only one may be given.
        """
        if cond_signals and cond_provider:
            raise ConfigError("pass either cond_signals or cond_provider, not both")
        cond_signals = cond_signals or {}
        bad = [n for n in cond_signals if n not in self.cond_layers]
        if bad:
            raise ConfigError(f"conditioning signals for non-selected layers {bad}")
        trace = ForwardTrace(hidden=[], conditioned={}, cond_signals={})

        cur = self._linear(x, "input_proj")
        trace.hidden.append(cur)
        for l in range(1, self.enc.num_layers + 1):
            n = l - 1
            c = None
            if n in cond_signals:
                c = ad.as_tensor(cond_signals[n], dtype=self.dtype)
            elif cond_provider is not None and n in self.cond_layers:
                c = cond_provider(n, cur)
            if c is not None:
                if c.shape[-1] != self.enc.hidden_dim:
                    raise ShapeError(f"conditioning signal for layer {n} has "
                                     f"dim {c.shape[-1]}, expected {self.enc.hidden_dim}")
                trace.cond_signals[n] = c
                cond = ad.broadcast_add(cur, c)
                trace.conditioned[n] = cond
                cur = cond
            cur = self._encoder_layer(cur, n)
            trace.hidden.append(cur)
        return trace

    def weighted_sum(self, hidden, conditioned=None) -> Tensor:
        conditioned = conditioned or {}
        n_states = self.enc.num_layers + 1
        if len(hidden) != n_states:
            raise ShapeError(f"weighted_sum: expected {n_states} states, "
                             f"got {len(hidden)}")
        states = [conditioned.get(n, hidden[n]) for n in range(n_states)]
        shape = states[0].shape
        for st in states:
            if st.shape != shape:
                raise ShapeError(f"weighted_sum: shape mismatch {st.shape} vs {shape}")
        alpha = ad.softmax(self.params["agg.logits"], axis=0)
        out = None
        for n, state in enumerate(states):
            term = ad.mul(state, ad.reshape(ad.narrow(alpha, 0, n, 1), (1, 1, 1)))
            out = term if out is None else ad.add(out, term)
        return out

    def _se_gate(self, x, prefix):
        # x: (B, C, T); squeeze over time, excite per channel
        z = ad.mean(x, axis=2)
        g = ad.sigmoid(self._linear(ad.relu(self._linear(z, f"{prefix}.se.fc1")),
                                    f"{prefix}.se.fc2"))
        return ad.mul(x, ad.reshape(g, (x.shape[0], x.shape[1], 1)))

    def _ecapa_block(self, x, j, dilation):
        p = f"ecapa.block{j}"
        split = self.head.channels // 4
        h = ad.relu(self._conv(x, f"{p}.conv_in"))
        parts = [ad.narrow(h, 1, m * split, split) for m in range(4)]
        outs = [parts[0]]
        for m in range(1, 4):
            y = ad.add(parts[m], outs[-1])
            y = ad.relu(self._conv(y, f"{p}.res2.{m}", dilation=dilation,
                                   padding=dilation))
            outs.append(y)
        h = ad.concat(outs, axis=1)
        h = ad.relu(self._conv(h, f"{p}.conv_out"))
        h = self._se_gate(h, p)
        return ad.add(x, h)

    def ecapa_blocks(self, z_out: Tensor) -> Tensor:
        """(B, T, D) -> (B, T, C) through dilated Res2 + SE blocks."""
        h = ad.transpose(z_out, (0, 2, 1))
        h = ad.relu(self._conv(h, "ecapa.front", padding=2))
        outs = []
        for j, dil in enumerate((1, 2, 3)):
            h = self._ecapa_block(h, j, dil)
            outs.append(h)
        h = ad.relu(self._conv(ad.concat(outs, axis=1), "ecapa.cat_proj"))
        h = ad.transpose(h, (0, 2, 1))
        # per-frame normalization keeps the pooled statistics well-scaled so
        # the projector's running batch statistics stay usable at inference
        return ad.layernorm(h, self.params["ecapa.ln.gamma"],
                            self.params["ecapa.ln.beta"])

    def attentive_stat_pooling(self, h: Tensor, prefix: str = "down") -> Tensor:
        """(B, T, C) -> (B, 2C) attention-weighted mean and std."""
        scores = self._linear(ad.tanh(self._linear(h, f"{prefix}.pool.att1")),
                              f"{prefix}.pool.att2")
        w = ad.softmax(scores, axis=1)
        mu = ad.sum_(ad.mul(w, h), axis=1)
        ex2 = ad.sum_(ad.mul(w, ad.mul(h, h)), axis=1)
        var = ad.relu(ad.sub(ex2, ad.mul(mu, mu)))
        sigma = ad.sqrt(ad.add(var, self.POOL_EPS))
        return ad.concat([mu, sigma], axis=1)

    def projector(self, s: Tensor, prefix: str = "down", training: bool = False) -> Tensor:
        p = f"{prefix}.proj"
        h = ad.batchnorm(s, self.params[f"{p}.bn.gamma"], self.params[f"{p}.bn.beta"],
                         self.params[f"{p}.bn.running_mean"].data,
                         self.params[f"{p}.bn.running_var"].data,
                         training=training)
        return self._linear(h, f"{p}.linear")

    def intermediate_head(self, z_n: Tensor, n: int, training: bool = False):
        if n not in self.cond_layers:
            raise ConfigError(f"layer {n} not in conditioning set {self.cond_layers}")
        s = self.attentive_stat_pooling(z_n, prefix=f"inter{n}")
        e = self.projector(s, prefix=f"inter{n}", training=training)
        v = self._linear(e, f"inter{n}.geo")
        return e, v

    def cond_proj(self, v_bar: Tensor, n: int) -> Tensor:
        if n not in self.cond_layers:
            raise ConfigError(f"layer {n} not in conditioning set {self.cond_layers}")
        name = "condproj.shared" if self.cond.share == "shared" else f"condproj.layer{n}"
        return self._linear(v_bar, name)

    def geo_pred(self, e: Tensor) -> Tensor:
        return self._linear(e, "geo")

    # -- classification loss -------------------------------------------------

    def _normalize(self, x: Tensor) -> Tensor:
        n2 = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
        return ad.div(x, ad.sqrt(ad.add(n2, self.NORM_EPS)))

    def cosine_logits(self, e: Tensor) -> Tensor:
        """Max-over-sub-center cosine similarity per class; no margin, no scale."""
        head = self.head
        en = self._normalize(e)
        wn = self._normalize(self.params["classifier.weight"])
        cos_all = ad.matmul(en, ad.transpose(wn, (1, 0)))
        per_class = ad.reshape(cos_all, (e.shape[0], head.num_classes, head.subcenters))
        return ad.max_(per_class, axis=2)

    def aam_subcenter_loss(self, e: Tensor, labels, margin: float | None = None,
                           scale: float | None = None):
        head = self.head
        margin = head.margin if margin is None else margin
        scale = head.scale if scale is None else scale
        labels = np.asarray(labels)
        if labels.ndim != 1 or labels.shape[0] != e.shape[0]:
            raise ConfigError(f"labels shape {labels.shape} vs batch {e.shape[0]}")
        if labels.min() < 0 or labels.max() >= head.num_classes:
            raise ConfigError(f"label outside [0, {head.num_classes})")
        cosine = self.cosine_logits(e)
        onehot = np.zeros((labels.shape[0], head.num_classes), dtype=self.dtype)
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        if margin > 0.0:
            cosc = ad.clip(cosine, -1.0 + self.COS_CLIP, 1.0 - self.COS_CLIP)
            theta = ad.clip(ad.add(ad.arccos(cosc), margin), 0.0, math.pi)
            margined = ad.cos(theta)
            logits = ad.add(ad.mul(margined, onehot),
                            ad.mul(cosine, 1.0 - onehot))
        else:
            logits = cosine
        scaled = ad.scale(logits, scale)
        logp = ad.log_softmax(scaled, axis=1)
        nll = ad.scale(ad.sum_(ad.mul(logp, onehot)), -1.0 / labels.shape[0])
        return nll, scaled

    # -- full forward --------------------------------------------------------

    def forward_full(self, wave, labels, geo_targets=None, *, training: bool = False,
                     detach_cond: bool = True, loss_cfg: LossConfig | None = None,
                     margin: float | None = None) -> ForwardTrace:
        loss_cfg = loss_cfg or LossConfig()
        if self.mode == "baseline" and not detach_cond:
            raise ConfigError("detach cannot be disabled in baseline mode")
        if self.mode != "baseline" and geo_targets is None:
            raise ConfigError(f"mode {self.mode} requires geolocation targets")
        x = self.frontend(wave)

        def provider(n, z_n):
            e_n, v_n = self.intermediate_head(z_n, n, training=training)
            trace.inter_embeddings[n] = e_n
            trace.inter_geo_preds[n] = v_n
            v_bar = ad.detach(v_n) if detach_cond else v_n
            return self.cond_proj(v_bar, n)

        if self.mode == "geo-cond" and self.cond_layers:
            trace = ForwardTrace(hidden=[], conditioned={}, cond_signals={})
            enc_trace = self.encoder_forward(x, cond_provider=provider)
            trace.hidden = enc_trace.hidden
            trace.conditioned = enc_trace.conditioned
            trace.cond_signals = enc_trace.cond_signals
        else:
            trace = self.encoder_forward(x)

        trace.z_out = self.weighted_sum(trace.hidden, trace.conditioned)
        h = self.ecapa_blocks(trace.z_out)
        trace.pooled = self.attentive_stat_pooling(h)
        trace.embedding = self.projector(trace.pooled, training=training)
        trace.loss_class, trace.logits = self.aam_subcenter_loss(
            trace.embedding, labels, margin=margin)

        if self.mode == "baseline":
            trace.loss_total = trace.loss_class
            return trace

        trace.geo_pred = self.geo_pred(trace.embedding)
        trace.loss_geo = geo_mse(trace.geo_pred, geo_targets)
        if self.mode == "geo-pred":
            trace.loss_total = loss_l1(trace.loss_class, trace.loss_geo, loss_cfg.lam)
        else:
            for n, v_n in trace.inter_geo_preds.items():
                trace.inter_geo_losses[n] = geo_mse(v_n, geo_targets)
            inter = [trace.inter_geo_losses[n] for n in sorted(trace.inter_geo_losses)]
            trace.loss_total = loss_l2(trace.loss_class, trace.loss_geo, inter,
                                       loss_cfg.lam, loss_cfg.gamma)
        return trace

    def embed(self, wave) -> np.ndarray:
        """Inference-mode embeddings, no tape."""
        trace = self.forward_inference(wave)
        return trace.embedding.data

    def forward_inference(self, wave) -> ForwardTrace:
        x = self.frontend(wave)

        def provider(n, z_n):
            e_n, v_n = self.intermediate_head(z_n, n, training=False)
            trace.inter_embeddings[n] = e_n
            trace.inter_geo_preds[n] = v_n
            return self.cond_proj(ad.detach(v_n), n)

        if self.mode == "geo-cond" and self.cond_layers:
            trace = ForwardTrace(hidden=[], conditioned={}, cond_signals={})
            enc_trace = self.encoder_forward(x, cond_provider=provider)
            trace.hidden = enc_trace.hidden
            trace.conditioned = enc_trace.conditioned
            trace.cond_signals = enc_trace.cond_signals
        else:
            trace = self.encoder_forward(x)
        trace.z_out = self.weighted_sum(trace.hidden, trace.conditioned)
        h = self.ecapa_blocks(trace.z_out)
        trace.pooled = self.attentive_stat_pooling(h)
        trace.embedding = self.projector(trace.pooled, training=False)
        trace.logits = self.cosine_logits(trace.embedding)
        if self.mode != "baseline":
            trace.geo_pred = self.geo_pred(trace.embedding)
        return trace

    # -- config round-trip ---------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.enc),
            "cond": asdict(self.cond),
            "head": asdict(self.head),
            "mode": self.mode,
            "seed": self.seed,
            "dtype": self.dtype.name,
            "labels": list(self.labels),
        }

    @classmethod
    def from_config_dict(cls, cfg: dict) -> "LIDModel":
        def tup(d, keys):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

        enc = EncoderConfig(**tup(cfg["encoder"], None))
        cond = CondConfig(**tup(cfg["cond"], None))
        head = HeadConfig(**cfg["head"])
        return cls(enc, cond, head, mode=cfg["mode"], seed=cfg["seed"],
                   dtype=np.dtype(cfg["dtype"]), labels=tuple(cfg.get("labels", ())))
