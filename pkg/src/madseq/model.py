"""Convolutional stem, transformer encoder and sequence decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes.

    Parameters
    ----------
    vocab_size : int
        Number of token ids.
    max_seq_len : int
        Length of the learned sequence positional encodings.
    embed_dim, num_heads, ffn_dim : int
        Transformer widths. embed_dim must be divisible by num_heads.
    enc_layers, dec_layers : int
        Encoder and decoder depths.
    stem_channels : tuple[int, int, int]
        Channels of the three stem blocks (strides 4, 4, 2).
    identity_blocks : bool
        Diagnostic mode: decoder blocks pass their input through unchanged.

    """

    vocab_size: int = 546
    max_seq_len: int = 501
    embed_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 512
    enc_layers: int = 3
    dec_layers: int = 3
    stem_channels: tuple[int, int, int] = (32, 64, 128)
    identity_blocks: bool = False

    def __post_init__(self):
        """Validate sizes."""
        object.__setattr__(self, "stem_channels", tuple(self.stem_channels))
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}."
            )
        if self.dec_layers < 1:
            raise ValueError("dec_layers must be >= 1.")
        if len(self.stem_channels) != 3:
            raise ValueError("stem_channels must have three entries.")

    @property
    def stem_stride(self) -> int:
        """Return total stride of the stem."""
        return 32

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


def _init_linear(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=0.02)
    if isinstance(module, nn.Linear) and module.bias is not None:
        nn.init.zeros_(module.bias)


class ConvStem(nn.Module):
    """Three strided convolution blocks with total stride 32."""

    def __init__(self, channels: Sequence[int], embed_dim: int):
        """Init method."""
        super().__init__()
        blocks = []
        c_in = 3
        for c_out, stride in zip(channels, (4, 4, 2)):
            blocks += [
                nn.Conv2d(c_in, c_out, kernel_size=stride, stride=stride),
                nn.GELU(),
                nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
                nn.GELU(),
            ]
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Conv2d(c_in, embed_dim, kernel_size=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Return (B, embed_dim, H // 32, W // 32) features of (B, 3, H, W) images."""
        return self.proj(self.blocks(images))


def sine_position_encoding_2d(
    height: int, width: int, dim: int, temperature: float = 10000.0
) -> torch.Tensor:
    """Return fixed (height * width, dim) 2D sinusoidal encodings, row-major.

    Half of the channels encode y and half encode x.

    """
    if dim % 4:
        raise ValueError(f"dim must be divisible by 4, got {dim}.")
    quarter = dim // 4
    freqs = temperature ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = torch.arange(height, dtype=torch.float64)[:, None] * freqs
    xs = torch.arange(width, dtype=torch.float64)[:, None] * freqs
    enc_y = torch.cat([ys.sin(), ys.cos()], dim=1)
    enc_x = torch.cat([xs.sin(), xs.cos()], dim=1)
    enc = torch.cat(
        [
            enc_y[:, None, :].expand(height, width, 2 * quarter),
            enc_x[None, :, :].expand(height, width, 2 * quarter),
        ],
        dim=2,
    )
    return enc.reshape(height * width, dim).float()


class KVCache:
    """Self-attention keys and values of already decoded positions, per layer."""

    def __init__(self, num_layers: int):
        """Init method."""
        self._keys: list[Optional[torch.Tensor]] = [None] * num_layers
        self._values: list[Optional[torch.Tensor]] = [None] * num_layers

    @property
    def length(self) -> int:
        """Return number of cached positions."""
        k = self._keys[0]
        return 0 if k is None else k.shape[2]

    def update(
        self, layer: int, key: torch.Tensor, value: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Append (B, H, L, hd) key/value and return the full cached tensors."""
        if self._keys[layer] is not None:
            key = torch.cat([self._keys[layer], key], dim=2)
            value = torch.cat([self._values[layer], value], dim=2)
        self._keys[layer] = key
        self._values[layer] = value
        return key, value


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query/key/value inputs."""

    def __init__(self, embed_dim: int, num_heads: int):
        """Init method."""
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        blocked: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
        layer: int = 0,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (output, attention weights of shape (B, H, Lq, Lk)).

        ``blocked`` is a boolean (Lq, Lk) array, true where attention is not
        allowed.

        """
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if cache is not None:
            k, v = cache.update(layer, k, v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    """Two-layer GELU MLP."""

    def __init__(self, embed_dim: int, ffn_dim: int):
        """Init method."""
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return FFN output."""
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention and FFN block."""

    def __init__(self, cfg: ModelConfig):
        """Init method."""
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return updated tokens."""
        h = self.norm1(x)
        x = x + self.attn(h, h, h)[0]
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    """Pre-norm self-attention, cross-attention and FFN block.

    Sequence positional encodings are added to the self-attention queries and
    keys and to the cross-attention queries.

    """

    def __init__(self, cfg: ModelConfig):
        """Init method."""
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.cross_attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads)
        self.norm3 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim)

    def forward(
        self,
        x: torch.Tensor,
        pos: torch.Tensor,
        memory: torch.Tensor,
        blocked: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
        layer: int = 0,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return updated tokens and [self, cross] attention weights."""
        h = self.norm1(x)
        a, w_self = self.self_attn(h + pos, h + pos, h, blocked, cache, layer)
        x = x + a
        h = self.norm2(x)
        a, w_cross = self.cross_attn(h + pos, memory, memory)
        x = x + a
        x = x + self.ffn(self.norm3(x))
        return x, [w_self, w_cross]


class MaskedAutoDecoder(nn.Module):
    """Stem + encoder producing image memory and a shared sequence decoder.

    The decoder runs bidirectionally for masked autodecoding or with a
    triangular causal mask for the autoregressive baseline. Every decoder
    layer's output goes through the same final norm and output projection.

    ``decoder_calls`` and ``images_encoded`` count forward passes.

    """

    def __init__(self, cfg: ModelConfig):
        """Init method.

        Parameters
        ----------
        cfg : ModelConfig
            Architecture sizes.

        """
        super().__init__()
        self.cfg = cfg
        self.stem = ConvStem(cfg.stem_channels, cfg.embed_dim)
        self.encoder_layers = nn.ModuleList(
            [EncoderLayer(cfg) for _ in range(cfg.enc_layers)]
        )
        self.encoder_norm = nn.LayerNorm(cfg.embed_dim)
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.seq_pos = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.embed_dim))
        self.decoder_layers = nn.ModuleList(
            [DecoderLayer(cfg) for _ in range(cfg.dec_layers)]
        )
        self.decoder_norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab_size)
        self.decoder_calls = 0
        self.images_encoded = 0
        self.apply(_init_linear)
        nn.init.trunc_normal_(self.seq_pos, std=0.02)

    def stem_parameters(self) -> list[nn.Parameter]:
        """Return parameters trained with the stem learning rate."""
        return list(self.stem.parameters())

    def stem_encode(self, images: torch.Tensor) -> torch.Tensor:
        """Return (B, D, H // 32, W // 32) stem features."""
        return self.stem(images)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Return (B, (H // 32) * (W // 32), D) memory of (B, 3, H, W) images."""
        feats = self.stem_encode(images)
        b, d, h, w = feats.shape
        pos = sine_position_encoding_2d(h, w, d).to(feats)
        memory = self.encoder_forward(feats.flatten(2).transpose(1, 2), pos)
        self.images_encoded += b
        return memory

    def encoder_forward(self, tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        """Return memory of (B, S, D) feature tokens with (S, D) encodings added."""
        x = tokens + pos
        if not self.encoder_layers:
            return x
        for layer in self.encoder_layers:
            x = layer(x)
        return self.encoder_norm(x)

    def causal_block(
        self, length: int, offset: int = 0, device=None
    ) -> torch.Tensor:
        """Return (length, offset + length) mask blocking future positions."""
        q = torch.arange(offset, offset + length, device=device)[:, None]
        k = torch.arange(offset + length, device=device)[None, :]
        return k > q

    def decode(
        self,
        tokens: torch.Tensor,
        memory: torch.Tensor,
        causal: bool = False,
        cache: Optional[KVCache] = None,
        attention: Optional[list] = None,
    ) -> torch.Tensor:
        """Return logits of every decoder layer, shape=(layers, B, L, V).

        Parameters
        ----------
        tokens : torch.Tensor
            (B, L) token ids.
        memory : torch.Tensor
            (B, S, D) image memory.
        causal : bool, optional
            Apply the triangular causal mask. Default is False.
        cache : KVCache, optional
            Cached keys/values; ``tokens`` then continue the cached positions.
        attention : list, optional
            When given, attention weights of every layer are appended to it.

        """
        offset = 0 if cache is None else cache.length
        length = tokens.shape[1]
        if offset + length > self.cfg.max_seq_len:
            raise ValueError(
                f"Sequence length {offset + length} exceeds max_seq_len "
                f"{self.cfg.max_seq_len}."
            )
        self.decoder_calls += 1
        x = self.token_embed(tokens)
        pos = self.seq_pos[offset : offset + length]
        blocked = None
        if causal and (length > 1 or offset > 0):
            blocked = self.causal_block(length, offset, device=tokens.device)
        outputs = []
        for i, layer in enumerate(self.decoder_layers):
            if not self.cfg.identity_blocks:
                x, weights = layer(x, pos, memory, blocked, cache, i)
                if attention is not None:
                    attention.append(weights)
            outputs.append(self.head(self.decoder_norm(x)))
        return torch.stack(outputs)

    def forward(
        self, images: torch.Tensor, tokens: torch.Tensor, causal: bool = False
    ) -> torch.Tensor:
        """Return all-layer logits of tokens decoded against images."""
        return self.decode(tokens, self.encode(images), causal=causal)


def restricted_log_softmax(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Return log-probabilities normalized over allowed ids, -inf elsewhere."""
    blocked = torch.ones(logits.shape[-1], dtype=torch.bool, device=logits.device)
    blocked[allowed] = False
    return logits.masked_fill(blocked, float("-inf")).log_softmax(dim=-1)


@torch.no_grad()
def ar_generate(
    model: MaskedAutoDecoder,
    prompt: Sequence[int],
    memory: torch.Tensor,
    max_len: int,
    allowed: Optional[Sequence[int]] = None,
    use_cache: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Greedy autoregressive generation of max_len - len(prompt) tokens.

    Every step is one decoder forward pass. With ``use_cache`` the prompt is
    processed once and every later step feeds only the newest token; otherwise
    the full sequence is recomputed each step. Generation never stops early.

    Returns
    -------
    tokens : torch.Tensor
        (max_len - len(prompt),) generated ids.
    probs : torch.Tensor
        (max_len - len(prompt), V) step distributions over allowed ids.

    """
    device = memory.device
    seq = torch.as_tensor(np.asarray(prompt), dtype=torch.long, device=device)[None]
    n_steps = max_len - seq.shape[1]
    allowed_t = None
    if allowed is not None:
        allowed_t = torch.as_tensor(
            np.asarray(allowed), dtype=torch.long, device=device
        )
    cache = KVCache(model.cfg.dec_layers) if use_cache else None
    tokens, probs = [], []
    step_input = seq
    for _ in range(n_steps):
        if use_cache:
            out = model.decode(step_input, memory, causal=True, cache=cache)
            logits = out[-1, 0, -1]
        else:
            logits = model.decode(seq, memory, causal=True)[-1, 0, -1]
        if allowed_t is not None:
            p = restricted_log_softmax(logits, allowed_t).exp()
        else:
            p = logits.softmax(dim=-1)
        token = torch.argmax(p).view(1, 1)
        tokens.append(token.view(()))
        probs.append(p)
        seq = torch.cat([seq, token], dim=1)
        step_input = token
    if not tokens:
        return (
            torch.zeros(0, dtype=torch.long, device=device),
            torch.zeros(0, model.cfg.vocab_size, device=device),
        )
    return torch.stack(tokens), torch.stack(probs)


@dataclass
class GradCheckResult:
    """Worst disagreement between analytic and central-difference gradients.

    ``passed`` is true when every coordinate satisfies
    |a - n| <= atol + rtol * |n|.

    """

    max_rel_error: float
    max_abs_error: float = 0.0
    passed: bool = True
    per_parameter: dict[str, float] = field(default_factory=dict)
    num_coords: int = 0


def grad_check(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    epsilon: float = 1e-4,
    coords_per_parameter: int = 3,
    parameter_names: Optional[Sequence[str]] = None,
    seed: int = 0,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    log_level: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    Coordinates are drawn at random per parameter, preferring ones with a
    non-zero analytic gradient. The relative error of a coordinate is
    |a - n| / max(|a|, |n|, 1e-10). Run the model in double precision.

    Parameters
    ----------
    rtol : float, optional
        Relative tolerance of the pass test. Default is 1e-4.
    atol : float, optional
        Absolute tolerance of the pass test. It covers the round-off of the
        difference quotient, about |loss| * 1e-16 / epsilon, which dominates
        for coordinates whose gradient is close to zero. Default is 1e-7.

    """
    rng = np.random.default_rng(seed)
    named = dict(model.named_parameters())
    names = list(parameter_names) if parameter_names is not None else list(named)
    model.zero_grad()
    loss = loss_fn(model)
    loss.backward()
    result = GradCheckResult(max_rel_error=0.0)
    with torch.no_grad():
        for name in names:
            p = named[name]
            if p.grad is None:
                continue
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            nonzero = torch.nonzero(grad).view(-1).cpu().numpy()
            pool = nonzero if len(nonzero) else np.arange(flat.numel())
            n_picks = min(coords_per_parameter, len(pool))
            picks = rng.choice(pool, n_picks, replace=False)
            worst = 0.0
            for idx in picks:
                orig = flat[idx].item()
                flat[idx] = orig + epsilon
                f_plus = loss_fn(model).item()
                flat[idx] = orig - epsilon
                f_minus = loss_fn(model).item()
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2 * epsilon)
                analytic = grad[idx].item()
                abs_err = abs(analytic - numeric)
                denom = max(abs(analytic), abs(numeric), 1e-10)
                worst = max(worst, abs_err / denom)
                result.max_abs_error = max(result.max_abs_error, abs_err)
                if abs_err > atol + rtol * abs(numeric):
                    result.passed = False
                result.num_coords += 1
            result.per_parameter[name] = worst
            result.max_rel_error = max(result.max_rel_error, worst)
            if log_level > 1:
                print(f"  - {name}: max rel. error = {worst:.3e}")
    if log_level:
        print(f" gradient check: max rel. error = {result.max_rel_error:.3e}")
        print(f" gradient check: max abs. error = {result.max_abs_error:.3e}")
    return result


def image_tensor(images: Sequence[np.ndarray], device=None) -> torch.Tensor:
    """Return (B, 3, H, W) float tensor in [0, 1] of (H, W, 3) uint8 images."""
    batch = np.stack([np.asarray(im, dtype=np.uint8) for im in images])
    t = torch.from_numpy(batch.astype("float32") / 255.0).permute(0, 3, 1, 2)
    return t.contiguous().to(device) if device is not None else t.contiguous()
