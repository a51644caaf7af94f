"""A small ConViT: patch embedding, GPSA blocks, late class token, SA blocks."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .metrics import AttentionRecord
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    num_gpsa_layers: int = 2
    num_sa_layers: int = 1
    num_heads: int = 4
    head_dim: int = 12
    ffn_ratio: int = 4
    num_classes: int = 10
    locality_strength: float = 1.0
    conv_init: bool = True
    strict_conv_init: bool = False
    gate_trainable: bool = True
    use_abs_pos_embed: bool = True
    positional_mode: str = "gpsa"
    scale_content: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "channels", "num_heads", "head_dim",
                     "ffn_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.num_gpsa_layers < 0 or self.num_sa_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.num_gpsa_layers + self.num_sa_layers < 1:
            raise ConfigError("the model needs at least one attention block")
        if self.positional_mode not in ("gpsa", "psa"):
            raise ConfigError(f"unknown positional_mode {self.positional_mode!r}")
        if self.num_gpsa_layers and (self.conv_init or self.strict_conv_init):
            A.kernel_size(self.num_heads)
        if self.locality_strength <= 0:
            raise ConfigError("locality_strength must be positive")

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def grid(self) -> A.PatchGrid:
        n = self.image_size // self.patch_size
        return A.PatchGrid(n, n)

    @property
    def num_patches(self) -> int:
        return self.grid.L

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count of trainable scalars for ``cfg``."""
    d, h = cfg.embed_dim, cfg.num_heads
    hidden = cfg.ffn_ratio * d
    patch = cfg.channels * cfg.patch_size ** 2
    block = 4 * d                       # two layernorms
    block += 4 * d * d + d              # W_qry, W_key, W_val, W_out, b_out
    block += d * hidden + hidden + hidden * d + d
    gpsa_extra = 3 * h + h              # v_pos and gating
    total = patch * d + d               # patch projection
    total += cfg.num_patches * d        # absolute positional embedding
    total += d                          # class token
    total += cfg.num_gpsa_layers * (block + gpsa_extra) + cfg.num_sa_layers * block
    total += 2 * d + d * cfg.num_classes + cfg.num_classes
    return total


class Block:
    """Pre-norm transformer block: ``z + attn(LN(z))`` then ``z + FFN(LN(z))``."""

    def __init__(self, attn: A.SaLayer, ffn_ratio: int, rng: np.random.Generator):
        d = attn.embed_dim
        hidden = ffn_ratio * d
        self.attn = attn
        self.ln1_gain = T.parameter(np.ones(d))
        self.ln1_bias = T.parameter(np.zeros(d))
        self.ln2_gain = T.parameter(np.ones(d))
        self.ln2_bias = T.parameter(np.zeros(d))
        self.fc1_w = T.parameter(A.trunc_normal(rng, (d, hidden)))
        self.fc1_b = T.parameter(np.zeros(hidden))
        self.fc2_w = T.parameter(A.trunc_normal(rng, (hidden, d)))
        self.fc2_b = T.parameter(np.zeros(d))

    def parameters(self) -> dict[str, Tensor]:
        params = {f"attn.{k}": v for k, v in self.attn.parameters().items()}
        params.update({
            "ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
            "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias,
            "ffn.fc1_w": self.fc1_w, "ffn.fc1_b": self.fc1_b,
            "ffn.fc2_w": self.fc2_w, "ffn.fc2_b": self.fc2_b,
        })
        return params

    def ffn(self, x: Tensor) -> Tensor:
        return T.matmul(T.gelu(T.matmul(x, self.fc1_w) + self.fc1_b), self.fc2_w) + self.fc2_b


def block_forward(z, block: Block, table: A.RelPosTable | None = None):
    """Returns ``(output, attention)`` for one block."""
    z = T.tensor(z)
    out, attn = block.attn(T.layernorm(z, block.ln1_gain, block.ln1_bias), table)
    z1 = z + out
    z2 = z1 + block.ffn(T.layernorm(z1, block.ln2_gain, block.ln2_bias))
    return z2, attn


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, L, C*p*p); patches in row-major grid order."""
    B, C, H, W = images.shape
    p = patch_size
    x = images.reshape(B, C, H // p, p, W // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


class ConViT:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        d = cfg.embed_dim
        self.grid = cfg.grid
        self.table = A.build_relpos_table(self.grid)
        self.patch_w = T.parameter(A.trunc_normal(rng, (cfg.channels * cfg.patch_size ** 2, d)))
        self.patch_b = T.parameter(np.zeros(d))
        self.pos_embed = T.parameter(A.trunc_normal(rng, (cfg.num_patches, d)))
        self.cls_token = T.parameter(A.trunc_normal(rng, (1, d)))
        self.gpsa_blocks: list[Block] = []
        for _ in range(cfg.num_gpsa_layers):
            layer = A.GpsaLayer(cfg.num_heads, cfg.head_dim, rng, scale=cfg.scale_content,
                                mode=cfg.positional_mode, gate_trainable=cfg.gate_trainable)
            if cfg.conv_init or cfg.strict_conv_init:
                A.conv_init(layer, cfg.locality_strength, strict=cfg.strict_conv_init)
            self.gpsa_blocks.append(Block(layer, cfg.ffn_ratio, rng))
        self.sa_blocks = [Block(A.SaLayer(cfg.num_heads, cfg.head_dim, rng, scale=cfg.scale_content),
                                cfg.ffn_ratio, rng)
                          for _ in range(cfg.num_sa_layers)]
        self.norm_gain = T.parameter(np.ones(d))
        self.norm_bias = T.parameter(np.zeros(d))
        self.head_w = T.parameter(A.trunc_normal(rng, (d, cfg.num_classes)))
        self.head_b = T.parameter(np.zeros(cfg.num_classes))
        self.pos_embed_masked = False
        for name, p in self.parameters().items():
            p.name = name

    @property
    def blocks(self) -> list[Block]:
        return self.gpsa_blocks + self.sa_blocks

    def gpsa_layers(self) -> list[A.GpsaLayer]:
        return [b.attn for b in self.gpsa_blocks]

    def parameters(self) -> dict[str, Tensor]:
        params = {"patch_embed.weight": self.patch_w, "patch_embed.bias": self.patch_b,
                  "pos_embed": self.pos_embed, "cls_token": self.cls_token}
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                params[f"blocks.{i}.{k}"] = v
        params.update({"norm.gain": self.norm_gain, "norm.bias": self.norm_bias,
                       "head.weight": self.head_w, "head.bias": self.head_b})
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- forward -----------------------------------------------------------
    def patch_embed(self, images) -> Tensor:
        images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        cfg = self.config
        if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected images of shape (C, H, W) = "
                             f"{(cfg.channels, cfg.image_size, cfg.image_size)}, got {images.shape[1:]}")
        x = T.matmul(T.tensor(extract_patches(images, cfg.patch_size)), self.patch_w) + self.patch_b
        if cfg.use_abs_pos_embed and not self.pos_embed_masked:
            x = x + self.pos_embed
        return x[0] if single else x

    def forward(self, images, capture: bool = False):
        """Logits of shape (num_classes,) or (B, num_classes).

        With ``capture`` the per-layer attention maps are returned as well.
        """
        x = self.patch_embed(images)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        maps, kinds = [], []
        for block in self.gpsa_blocks:
            x, attn = block_forward(x, block, self.table)
            if capture:
                maps.append(attn.data.copy())
                kinds.append("gpsa")
        B = x.shape[0]
        cls = T.broadcast_to(T.reshape(self.cls_token, (1, 1, -1)), (B, 1, self.config.embed_dim))
        x = T.concat([cls, x], axis=1)
        for block in self.sa_blocks:
            x, attn = block_forward(x, block)
            if capture:
                maps.append(attn.data.copy())
                kinds.append("sa")
        cls_out = T.layernorm(x[:, 0, :], self.norm_gain, self.norm_bias)
        logits = T.matmul(cls_out, self.head_w) + self.head_b
        if single:
            logits = logits[0]
            maps = [m[0] for m in maps]
        if capture:
            return logits, AttentionRecord(maps, kinds, self.grid)
        return logits

    __call__ = forward


def mask_abs_pos_embed(model: ConViT, on: bool) -> None:
    """Drop the absolute positional embedding from forward passes without touching it."""
    model.pos_embed_masked = bool(on)


def mask_attention_mode(model: ConViT, mode: str, layers=None) -> None:
    """Force sigmoid(gating) in GPSA layers at eval time.

    ``content_only`` sets it to 0 (positional attention masked), ``position_only``
    to 1 (content attention masked), ``none`` restores the learned gates.
    ``layers`` selects GPSA layer indices; default is all of them.
    """
    gpsa = model.gpsa_layers()
    if not gpsa:
        raise ContractError("model has no GPSA layers to mask")
    values = {"none": None, "content_only": 0.0, "position_only": 1.0}
    if mode not in values:
        raise ContractError(f"unknown attention mask mode {mode!r}")
    chosen = range(len(gpsa)) if layers is None else layers
    for i, layer in enumerate(gpsa):
        if mode == "none" or i in chosen:
            layer.gate_override = values[mode]


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: ConViT, directory, step: int = 0, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in model.parameters().items():
        fname = name.replace(".", "_") + ".bin"
        T.save_tensor(directory / fname, p)
        files[name] = fname
    manifest = {"config": model.config.to_dict(), "tensors": files, "step": step}
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(directory) -> tuple[ConViT, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {directory}: {exc}") from None
    model = ConViT(ModelConfig.from_dict(manifest["config"]))
    params = model.parameters()
    if set(manifest["tensors"]) != set(params):
        raise FormatError("checkpoint tensor names do not match the model built from its config")
    for name, fname in manifest["tensors"].items():
        arr = T.load_tensor(directory / fname).data
        if arr.shape != params[name].shape:
            raise FormatError(f"{name}: checkpoint shape {arr.shape} vs model {params[name].shape}")
        params[name].data[...] = arr
    return model, manifest


def param_role(name: str) -> str:
    """Coarse role of a parameter name, for gradient-check reports."""
    if name.startswith("patch_embed") or name in ("pos_embed", "cls_token"):
        return "embed"
    if name.startswith("head"):
        return "head"
    leaf = name.rsplit(".", 1)[-1]
    roles = {"w_qry": "W_qry", "w_key": "W_key", "w_val": "W_val", "w_out": "W_out",
             "b_out": "W_out", "v_pos": "v_pos", "gating": "lambda"}
    if leaf in roles:
        return roles[leaf]
    if ".ffn." in name:
        return "FFN"
    return "LN"
