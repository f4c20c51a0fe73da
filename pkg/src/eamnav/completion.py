"""Denoising diffusion over categorical floor-plan tensors.

A small convolutional noise predictor is trained on one-hot category grids
(mapped to [-1, 1]); unobserved map regions are completed by masked
inpainting that re-blends forward-sampled known content with the reverse
chain at every step. Low-rank adapters fine-tune the frozen base model on
shifted layout distributions. Schedules, the forward/reverse equations and
the blending loop are plain array math; the network and optimizer run on
torch (CPU), seeded and deterministic.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

_DDPM_MAGIC = b"eamnav-ddpm/1\n"
_LORA_MAGIC = b"eamnav-lora/1\n"


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; index i of each array holds timestep t = i + 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_min: float
    beta_max: float

    def abar(self, t: int) -> float:
        """Cumulative noise coefficient, with the convention abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def at(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t) for 1 <= t <= T."""
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1]), float(self.alpha[t - 1]), float(self.alpha_bar[t - 1])


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.03) -> NoiseSchedule:
    # default beta_max chosen so the cumulative coefficient ends below 0.05
    # at T = 200 and the terminal state is near-pure noise
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("betas must satisfy 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar, beta_min, beta_max)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    ab = schedule.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Single noising step x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps."""
    _, a, _ = schedule.at(t)
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * eps


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    """beta-tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
    b, _, ab = schedule.at(t)
    ab_prev = schedule.abar(t - 1)
    return (1.0 - ab_prev) / (1.0 - ab) * b


def reverse_step(
    denoiser,
    x_t: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """One ancestral sampling step with fixed posterior variance.

    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t); noise
    scaled by sqrt(beta-tilde_t) is added except at t = 1 (or when rng is
    None, for deterministic chains). `denoiser` is any callable
    (x, t) -> eps_hat, batched or unbatched alike.
    """
    b, a, ab = schedule.at(t)
    eps_hat = denoiser(x_t, t)
    mu = (x_t - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if t > 1 and rng is not None:
        mu = mu + math.sqrt(posterior_variance(schedule, t)) * rng.standard_normal(x_t.shape)
    return mu


# -- denoiser network -------------------------------------------------------------

def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, cin), cin)
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.t_proj = nn.Linear(temb, cout)

    def forward(self, x, temb):
        h = self.conv(nn.functional.silu(self.norm(x)))
        return h + self.t_proj(temb)[:, :, None, None]


class Denoiser(nn.Module):
    """Conv encoder-decoder noise predictor: two stride-2 downs, two ups."""

    def __init__(self, channels: int = 16, width: int = 32, temb: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.channels = channels
        self.width = width
        self.temb_dim = temb
        self.seed = seed
        w = width
        self.t_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = nn.Conv2d(channels, w, 3, padding=1)
        self.b0 = _Block(w, w, temb)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.b1 = _Block(2 * w, 2 * w, temb)
        self.down2 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.b2 = _Block(4 * w, 4 * w, temb)
        self.mid = _Block(4 * w, 4 * w, temb)
        self.up1 = nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1)
        self.b3 = _Block(4 * w, 2 * w, temb)
        self.up2 = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.b4 = _Block(2 * w, w, temb)
        self.out = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.t_mlp(_sinusoidal_embedding(t, self.temb_dim).to(x.dtype))
        h0 = self.b0(self.stem(x), temb)
        h1 = self.b1(self.down1(h0), temb)
        h2 = self.b2(self.down2(h1), temb)
        m = self.mid(h2, temb)
        u1 = self.b3(torch.cat([self.up1(m), h1], dim=1), temb)
        u2 = self.b4(torch.cat([self.up2(u1), h0], dim=1), temb)
        return self.out(u2)

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        """Numpy-facing eps prediction; accepts (C,H,W) or (N,C,H,W)."""
        single = x.ndim == 3
        xb = x[None] if single else x
        tb = np.full(len(xb), t, dtype=np.float64) if np.isscalar(t) else np.asarray(t)
        with torch.no_grad():
            out = self(
                torch.from_numpy(np.ascontiguousarray(xb, dtype=np.float32)),
                torch.from_numpy(tb.astype(np.float32)),
            ).numpy().astype(x.dtype)
        return out[0] if single else out

    def __call__(self, x, t):
        if isinstance(x, np.ndarray):
            return self.predict(x, t)
        return super().__call__(x, t)


@dataclass(frozen=True)
class DiffusionHyper:
    batch_size: int = 8
    epochs: int = 10
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    val_fraction: float = 0.05
    ema_decay: float = 0.995  # 0 disables; final weights are the EMA shadow
    augment: bool = True  # random per-batch dihedral transform of the plans


def _signed(x: np.ndarray) -> np.ndarray:
    return 2.0 * x - 1.0


def _loss_batch(net, x0, t, eps, schedule_abar: torch.Tensor) -> torch.Tensor:
    ab = schedule_abar[t.long() - 1][:, None, None, None]
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    eps_hat = net(x_t, t)
    return ((eps - eps_hat) ** 2).sum(dim=(1, 2, 3)).mean()


def train_denoiser(
    corpus: np.ndarray,
    schedule: NoiseSchedule,
    hyper: DiffusionHyper,
    seed: int,
    net: Denoiser | None = None,
    min_corpus: int = 100,
):
    """Train the noise predictor on one-hot plan tensors.

    Returns (denoiser, curve); curve rows are (epoch, train_loss, val_loss)
    with per-sample summed-square losses. Deterministic in (corpus,
    schedule, hyper, seed).
    """
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 4:
        raise ValueError("corpus must be (N, C, H, W)")
    if len(corpus) < min_corpus:
        raise ValueError(f"corpus too small: {len(corpus)} < {min_corpus}")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    if net is None:
        net = Denoiser(channels=corpus.shape[1], seed=seed)
    abar_t = torch.from_numpy(schedule.alpha_bar.astype(np.float32))

    n_val = max(1, int(len(corpus) * hyper.val_fraction))
    perm = rng.permutation(len(corpus))
    val = torch.from_numpy(_signed(corpus[perm[:n_val]]))
    train = torch.from_numpy(_signed(corpus[perm[n_val:]]))
    # fixed validation pairs so the curve is comparable across epochs
    val_t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=len(val)).astype(np.float32))
    val_eps = torch.randn(val.shape, generator=gen)

    opt = torch.optim.AdamW(
        net.parameters(), lr=hyper.learning_rate, betas=hyper.betas,
        weight_decay=hyper.weight_decay,
    )
    ema = None
    if hyper.ema_decay > 0:
        ema = {k: v.detach().clone() for k, v in net.named_parameters()}
    curve = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(train), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            xb = train[idx]
            if hyper.augment:
                k = int(rng.integers(8))
                xb = torch.rot90(xb, k % 4, dims=(2, 3))
                if k >= 4:
                    xb = torch.flip(xb, dims=(3,))
            tb = torch.from_numpy(
                rng.integers(1, schedule.T + 1, size=len(idx)).astype(np.float32)
            )
            eb = torch.randn(xb.shape, generator=gen)
            loss = _loss_batch(net, xb, tb, eb, abar_t)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for k_, v in net.named_parameters():
                        ema[k_].mul_(hyper.ema_decay).add_(v, alpha=1 - hyper.ema_decay)
            losses.append(float(loss.detach()))
        with torch.no_grad():
            vl = float(_loss_batch(net, val, val_t, val_eps, abar_t))
        curve.append((epoch, float(np.mean(losses)), vl))
    if ema is not None:
        with torch.no_grad():
            for k_, v in net.named_parameters():
                v.copy_(ema[k_])
    return net, curve


def eval_denoiser_loss(net, corpus: np.ndarray, schedule: NoiseSchedule, seed: int) -> float:
    """Mean per-sample summed-square eps-prediction loss on a corpus."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.from_numpy(_signed(np.asarray(corpus, dtype=np.float32)))
    t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=len(x0)).astype(np.float32))
    eps = torch.randn(x0.shape, generator=gen)
    abar_t = torch.from_numpy(schedule.alpha_bar.astype(np.float32))
    with torch.no_grad():
        losses = []
        for i in range(0, len(x0), 32):
            losses.append(
                float(_loss_batch(net, x0[i:i + 32], t[i:i + 32], eps[i:i + 32], abar_t))
                * len(x0[i:i + 32])
            )
    return float(np.sum(losses) / len(x0))


# -- inpainting -------------------------------------------------------------------

def _decode_one_hot(x: np.ndarray) -> np.ndarray:
    """Argmax over channels, re-encoded as a {0,1} one-hot float tensor."""
    idx = x.argmax(axis=0)
    out = np.zeros_like(x, dtype=np.float32)
    c, h, w = x.shape
    out[idx, np.arange(h)[:, None], np.arange(w)[None, :]] = 1.0
    return out


def repaint_inpaint(
    denoiser,
    known: np.ndarray,
    mask: np.ndarray,
    schedule: NoiseSchedule,
    n_samples: int,
    rng: np.random.Generator,
    resample_steps: int = 1,
) -> list[np.ndarray]:
    """Masked completion: S independent samples of the unknown region.

    Per reverse step the known region is drawn from the forward process at
    the matching cumulative noise level (exactly the clean content at level
    0) and blended with the reverse-predicted unknown region through the
    mask. Outputs are argmax-decoded one-hot tensors whose known cells equal
    the input exactly. `resample_steps` > 1 re-noises and repeats each step.
    """
    known = np.asarray(known, dtype=np.float32)
    mask = np.asarray(mask)
    if mask.shape != known.shape[1:]:
        raise ValueError("mask must match the spatial shape of the known tensor")
    if not mask.any():
        return [known.copy() for _ in range(n_samples)]
    m = mask.astype(np.float32)[None, None, :, :]
    k_signed = _signed(known)[None]
    x = rng.standard_normal((n_samples,) + known.shape)
    for t in range(schedule.T, 0, -1):
        for u in range(resample_steps):
            ab_prev = schedule.abar(t - 1)
            if t - 1 == 0:
                x_known = np.broadcast_to(k_signed, x.shape)
            else:
                z = rng.standard_normal(x.shape)
                x_known = math.sqrt(ab_prev) * k_signed + math.sqrt(1.0 - ab_prev) * z
            x_unknown = reverse_step(denoiser, x, t, schedule, rng)
            x = m * x_unknown + (1.0 - m) * x_known
            if u + 1 < resample_steps and t > 1:
                x = forward_step(x, t, rng.standard_normal(x.shape), schedule)
    return [_decode_one_hot(x[i]) for i in range(n_samples)]


# -- low-rank adapters --------------------------------------------------------------

def default_lora_targets(net: Denoiser) -> list[str]:
    """The 3x3 block convolutions, the natural adaptation points."""
    return [name for name, _ in net.named_parameters() if name.endswith(".conv.weight")]


@dataclass
class LoraAdapter:
    rank: int
    scaling: float
    matrices: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    # per target name: (A: (r, d_in), B: (d_out, r)); weights are flattened
    # to (d_out, d_in) where d_in collapses input channels and kernel taps

    def parameters(self):
        for a, b in self.matrices.values():
            yield a
            yield b

    def n_trainable(self) -> int:
        return sum(a.numel() + b.numel() for a, b in self.matrices.values())


def make_lora(net: Denoiser, rank: int = 8, scaling: float = 1.0, seed: int = 0,
              targets: list[str] | None = None) -> LoraAdapter:
    """Zero-initialized adapter (B = 0): applying it reproduces the base."""
    gen = torch.Generator().manual_seed(seed)
    targets = default_lora_targets(net) if targets is None else targets
    params = dict(net.named_parameters())
    adapter = LoraAdapter(rank=rank, scaling=scaling)
    for name in targets:
        w = params[name]
        d_out = w.shape[0]
        d_in = int(np.prod(w.shape[1:]))
        a = torch.randn(rank, d_in, generator=gen) / math.sqrt(rank)
        b = torch.zeros(d_out, rank)
        a.requires_grad_(True)
        b.requires_grad_(True)
        adapter.matrices[name] = (a, b)
    return adapter


class LoraDenoiser:
    """View of a frozen base denoiser with W' = W + scaling * B @ A."""

    def __init__(self, base: Denoiser, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter
        self.channels = base.channels

    def _patched_params(self) -> dict[str, torch.Tensor]:
        params = {k: v.detach() for k, v in self.base.state_dict().items()}
        for name, (a, b) in self.adapter.matrices.items():
            w = params[name]
            delta = (b @ a).reshape(w.shape) * self.adapter.scaling
            params[name] = w + delta
        return params

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return functional_call(self.base, self._patched_params(), (x, t))

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        single = x.ndim == 3
        xb = x[None] if single else x
        tb = np.full(len(xb), t, dtype=np.float32) if np.isscalar(t) else np.asarray(t, dtype=np.float32)
        with torch.no_grad():
            out = self.forward(
                torch.from_numpy(np.ascontiguousarray(xb, dtype=np.float32)),
                torch.from_numpy(tb),
            ).numpy().astype(x.dtype)
        return out[0] if single else out

    def __call__(self, x, t):
        if isinstance(x, np.ndarray):
            return self.predict(x, t)
        return self.forward(x, t)


def apply_lora(denoiser: Denoiser, adapter: LoraAdapter) -> LoraDenoiser:
    params = dict(denoiser.named_parameters())
    for name, (a, b) in adapter.matrices.items():
        if name not in params:
            raise ValueError(f"adapter targets unknown weight {name}")
        w = params[name]
        if b.shape[0] != w.shape[0] or a.shape[1] != int(np.prod(w.shape[1:])):
            raise ValueError(f"adapter shape mismatch for {name}")
    return LoraDenoiser(denoiser, adapter)


def train_lora(
    base: Denoiser,
    adapter: LoraAdapter,
    corpus: np.ndarray,
    schedule: NoiseSchedule,
    hyper: DiffusionHyper,
    seed: int,
):
    """Fit only the adapter on a shifted corpus; base weights stay frozen."""
    corpus = np.asarray(corpus, dtype=np.float32)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model = apply_lora(base, adapter)
    abar_t = torch.from_numpy(schedule.alpha_bar.astype(np.float32))

    n_val = max(1, int(len(corpus) * hyper.val_fraction))
    perm = rng.permutation(len(corpus))
    val = torch.from_numpy(_signed(corpus[perm[:n_val]]))
    train = torch.from_numpy(_signed(corpus[perm[n_val:]]))
    val_t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=len(val)).astype(np.float32))
    val_eps = torch.randn(val.shape, generator=gen)

    opt = torch.optim.AdamW(
        adapter.parameters(), lr=hyper.learning_rate, betas=hyper.betas,
        weight_decay=hyper.weight_decay,
    )
    curve = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(train), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            xb = train[idx]
            tb = torch.from_numpy(
                rng.integers(1, schedule.T + 1, size=len(idx)).astype(np.float32)
            )
            eb = torch.randn(xb.shape, generator=gen)
            loss = _loss_batch(model, xb, tb, eb, abar_t)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        with torch.no_grad():
            vl = float(_loss_batch(model, val, val_t, val_eps, abar_t))
        curve.append((epoch, float(np.mean(losses)), vl))
    return adapter, curve


# -- persistence ---------------------------------------------------------------------

def save_denoiser_bytes(net: Denoiser, schedule: NoiseSchedule) -> bytes:
    state = net.state_dict()
    manifest = {
        "channels": net.channels,
        "width": net.width,
        "temb": net.temb_dim,
        "schedule": {"T": schedule.T, "beta_min": schedule.beta_min, "beta_max": schedule.beta_max},
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
    }
    buf = io.BytesIO()
    buf.write(_DDPM_MAGIC)
    head = json.dumps(manifest, sort_keys=True).encode()
    buf.write(len(head).to_bytes(8, "little"))
    buf.write(head)
    for k, v in state.items():
        buf.write(v.numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_denoiser_bytes(data: bytes) -> tuple[Denoiser, NoiseSchedule]:
    if not data.startswith(_DDPM_MAGIC):
        raise ValueError("not an eamnav-ddpm/1 checkpoint")
    off = len(_DDPM_MAGIC)
    hlen = int.from_bytes(data[off:off + 8], "little")
    off += 8
    manifest = json.loads(data[off:off + hlen])
    off += hlen
    net = Denoiser(channels=manifest["channels"], width=manifest["width"], temb=manifest["temb"])
    state = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        state[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    sch = manifest["schedule"]
    return net, make_schedule(sch["T"], sch["beta_min"], sch["beta_max"])


def save_denoiser(net: Denoiser, schedule: NoiseSchedule, path) -> None:
    with open(path, "wb") as f:
        f.write(save_denoiser_bytes(net, schedule))


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule]:
    with open(path, "rb") as f:
        return load_denoiser_bytes(f.read())


def save_lora_bytes(adapter: LoraAdapter) -> bytes:
    manifest = {
        "rank": adapter.rank,
        "scaling": adapter.scaling,
        "matrices": [
            [name, list(a.shape), list(b.shape)]
            for name, (a, b) in adapter.matrices.items()
        ],
    }
    buf = io.BytesIO()
    buf.write(_LORA_MAGIC)
    head = json.dumps(manifest, sort_keys=True).encode()
    buf.write(len(head).to_bytes(8, "little"))
    buf.write(head)
    for name, (a, b) in adapter.matrices.items():
        buf.write(a.detach().numpy().astype("<f4").tobytes())
        buf.write(b.detach().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_lora_bytes(data: bytes) -> LoraAdapter:
    if not data.startswith(_LORA_MAGIC):
        raise ValueError("not an eamnav-lora/1 checkpoint")
    off = len(_LORA_MAGIC)
    hlen = int.from_bytes(data[off:off + 8], "little")
    off += 8
    manifest = json.loads(data[off:off + hlen])
    off += hlen
    adapter = LoraAdapter(rank=manifest["rank"], scaling=manifest["scaling"])
    for name, a_shape, b_shape in manifest["matrices"]:
        a_count = int(np.prod(a_shape))
        a = np.frombuffer(data, dtype="<f4", count=a_count, offset=off).reshape(a_shape)
        off += a_count * 4
        b_count = int(np.prod(b_shape))
        b = np.frombuffer(data, dtype="<f4", count=b_count, offset=off).reshape(b_shape)
        off += b_count * 4
        ta = torch.from_numpy(a.copy())
        tb = torch.from_numpy(b.copy())
        ta.requires_grad_(True)
        tb.requires_grad_(True)
        adapter.matrices[name] = (ta, tb)
    return adapter


def save_lora(adapter: LoraAdapter, path) -> None:
    with open(path, "wb") as f:
        f.write(save_lora_bytes(adapter))


def load_lora(path) -> LoraAdapter:
    with open(path, "rb") as f:
        return load_lora_bytes(f.read())
