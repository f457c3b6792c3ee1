"""The transformer model: patch pipeline, encoder blocks whose linear maps
run either as classical affine layers or as quantum circuits, and the
canonical parameter registry.

Both modes expose the same registry interface, forward signature and loss
interface, so the training loop contains no mode-specific logic. The
encoder wiring normalises each sub-layer's output before the residual add:

    Z  = X + LayerNorm(attention_sublayer(X))
    X' = Z + LayerNorm(mlp_sublayer(Z))

which differs from the usual pre-norm transformer on purpose.

Quantum sub-layers come in two wiring schemes. "per-projection" (default)
gives each of the four attention projections, and each of the two MLP
stages, its own circuit over all hidden features. "split-halves" halves the
circuit width: each attention projection runs one shared half-width circuit
on both halves of every row, and each MLP stage runs two distinct
half-width circuits, one per half. Neither scheme carries a classical bias
unless vqc_bias is set.

Checkpoints are a directory of meta.json (config, registry listing, epoch,
metrics) plus params.bin (all tensors concatenated little-endian float64 in
registry order).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import qsim
from . import tensor as tn
from .errors import ConfigError, CorruptionError, ShapeError
from .tensor import Tensor

CHECKPOINT_FORMAT = "qvit-checkpoint-v1"
META_FILE = "meta.json"
PARAMS_FILE = "params.bin"

MODES = ("classical", "quantum")
SCHEMES = ("per-projection", "split-halves")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size setup;
    desk_config() is the small configuration used for CI and experiments."""

    image_size: int = 125
    crop_size: int = 120
    channels: int = 3
    patch_size: int = 10
    hidden_size: int = 8
    num_blocks: int = 4
    num_heads: int = 4
    mlp_hidden: int = 4
    num_classes: int = 2
    mode: str = "classical"
    qmha_scheme: str = "per-projection"
    vqc_bias: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.qmha_scheme not in SCHEMES:
            raise ConfigError(f"qmha_scheme must be one of {SCHEMES}, got {self.qmha_scheme!r}")
        for name in ("image_size", "crop_size", "channels", "patch_size", "hidden_size",
                     "num_blocks", "num_heads", "mlp_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.crop_size > self.image_size:
            raise ConfigError(
                f"crop_size {self.crop_size} exceeds image_size {self.image_size}"
            )
        if self.crop_size % self.patch_size != 0:
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.mode == "quantum" and self.qmha_scheme == "split-halves":
            if self.hidden_size % 2 != 0:
                raise ConfigError("split-halves scheme requires an even hidden_size")

    @property
    def grid_size(self) -> int:
        return self.crop_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def desk_config(cls, mode: str = "classical", **overrides) -> "ModelConfig":
        """Small setup where every quantum circuit is exactly four qubits."""
        base = dict(image_size=40, crop_size=40, channels=3, patch_size=10,
                    hidden_size=4, num_blocks=2, num_heads=2, mlp_hidden=4,
                    num_classes=2, mode=mode)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter registry


class ParamStore:
    """Named, ordered registry of every trainable tensor.

    The order is canonical and stable across runs; serialization and
    optimizer state both depend on it.
    """

    def __init__(self, entries: list[tuple[str, Tensor, bool]]):
        self._names = [name for name, _, _ in entries]
        self._params = {name: t for name, t, _ in entries}
        self._decay = {name: decay for name, _, decay in entries}
        if len(self._params) != len(entries):
            raise ValueError("duplicate parameter names in registry")

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._names)

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def items(self):
        for name in self._names:
            yield name, self._params[name]

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Sub-registry view with the prefix stripped from the names."""
        return {
            name[len(prefix):]: t for name, t in self.items() if name.startswith(prefix)
        }

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def total_params(self) -> int:
        return sum(t.size for _, t in self.items())

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.items()]

    def state_vector(self) -> np.ndarray:
        """All values concatenated in registry order, float64."""
        return np.concatenate([t.data.reshape(-1) for _, t in self.items()])

    def load_state_vector(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.total_params():
            raise CorruptionError(
                f"state vector has {values.size} values, registry holds {self.total_params()}"
            )
        offset = 0
        for _, t in self.items():
            t.data = values[offset:offset + t.size].reshape(t.shape).copy()
            offset += t.size


def _attention_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    d = cfg.hidden_size
    out = []
    if cfg.mode == "classical":
        for proj in "qkvo":
            out.append((f"attn.w{proj}", (d, d), True))
            out.append((f"attn.b{proj}", (d,), False))
    else:
        width = d if cfg.qmha_scheme == "per-projection" else d // 2
        for proj in "qkvo":
            out.append((f"attn.theta_{proj}", (width,), True))
            if cfg.vqc_bias:
                out.append((f"attn.bias_{proj}", (d,), False))
    return out


def _mlp_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    d = cfg.hidden_size
    out = []
    if cfg.mode == "classical":
        out.append(("mlp.w1", (cfg.mlp_hidden, d), True))
        out.append(("mlp.b1", (cfg.mlp_hidden,), False))
        out.append(("mlp.w2", (d, cfg.mlp_hidden), True))
        out.append(("mlp.b2", (d,), False))
    elif cfg.qmha_scheme == "per-projection":
        # both stages act on all hidden features; mlp_hidden does not apply
        out.append(("mlp.theta1", (d,), True))
        if cfg.vqc_bias:
            out.append(("mlp.bias1", (d,), False))
        out.append(("mlp.theta2", (d,), True))
        if cfg.vqc_bias:
            out.append(("mlp.bias2", (d,), False))
    else:
        half = d // 2
        for stage in ("1", "2"):
            out.append((f"mlp.theta{stage}a", (half,), True))
            out.append((f"mlp.theta{stage}b", (half,), True))
            if cfg.vqc_bias:
                out.append((f"mlp.bias{stage}", (d,), False))
    return out


def registry_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """Canonical (name, shape, weight_decay) listing of every trainable array."""
    d = cfg.hidden_size
    entries: list[tuple[str, tuple[int, ...], bool]] = [
        ("patch_embed.weight", (d, cfg.patch_dim), True),
        ("patch_embed.bias", (d,), False),
        ("class_token", (d,), False),
        ("pos_embed", (cfg.num_tokens, d), False),
    ]
    for b in range(cfg.num_blocks):
        prefix = f"block{b}."
        entries.append((prefix + "ln1.gamma", (d,), False))
        entries.append((prefix + "ln1.beta", (d,), False))
        entries.append((prefix + "ln2.gamma", (d,), False))
        entries.append((prefix + "ln2.beta", (d,), False))
        entries.extend((prefix + n, s, dec) for n, s, dec in _attention_shapes(cfg))
        entries.extend((prefix + n, s, dec) for n, s, dec in _mlp_shapes(cfg))
    entries.append(("head.weight", (cfg.num_classes, d), True))
    entries.append(("head.bias", (cfg.num_classes,), False))
    return entries


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters: N(0, 0.02) for weights, rotation angles, the class
    token and position embeddings; ones for norm gains; zeros for biases
    and norm offsets. Draw order equals registry order, so a seed pins the
    full initialisation."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, decay in registry_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        is_bias = leaf == "beta" or leaf.startswith("bias") or leaf in ("bq", "bk", "bv", "bo", "b1", "b2")
        if leaf == "gamma":
            values = np.ones(shape)
        elif is_bias:
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, 0.02, size=shape)
        entries.append((name, Tensor(values, requires_grad=True), decay))
    return ParamStore(entries)


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Per-component parameter counts plus the grand total."""
    counts: dict[str, int] = {}
    for name, shape, _ in registry_shapes(cfg):
        if name.startswith("block"):
            block, rest = name.split(".", 1)
            component = f"{block}.{rest.split('.')[0]}"
        else:
            component = name.split(".")[0]
        counts[component] = counts.get(component, 0) + int(np.prod(shape))
    counts["total"] = sum(v for k, v in counts.items())
    return counts


# ---------------------------------------------------------------------------
# forward pass


def extract_patches(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Center-crop then tile into flattened non-overlapping patches.

    Output rows are in row-major patch order; within a patch the layout is
    channel-major (all pixels of channel 0, then channel 1, ...).
    """
    image = np.asarray(image, dtype=np.float64)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} != configured {expected}")
    if cfg.crop_size > cfg.image_size:
        raise ConfigError("crop larger than image")
    offset = (cfg.image_size - cfg.crop_size) // 2
    cropped = image[:, offset:offset + cfg.crop_size, offset:offset + cfg.crop_size]
    g, p = cfg.grid_size, cfg.patch_size
    tiles = cropped.reshape(cfg.channels, g, p, g, p)
    tiles = tiles.transpose(1, 3, 0, 2, 4)  # (gy, gx, c, py, px)
    return tiles.reshape(cfg.num_patches, cfg.patch_dim)


def embed(patches, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Project patches to tokens, prepend the class token, add positions."""
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    tokens = tn.affine(patches, params.get("patch_embed.weight"), params.get("patch_embed.bias"))
    cls_row = tn.reshape(params.get("class_token"), (1, cfg.hidden_size))
    seq = tn.concat([cls_row, tokens], axis=0)
    return tn.add(seq, params.get("pos_embed"))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; softmax runs over the key axis."""
    dk = q.shape[-1]
    scores = tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / np.sqrt(dk))
    return tn.matmul(tn.softmax(scores), v)


@lru_cache(maxsize=None)
def _circuit(n: int) -> qsim.VqcSpec:
    return qsim.VqcSpec.ring_circuit(n)


def _project(x: Tensor, block_params: dict[str, Tensor], key: str, cfg: ModelConfig) -> Tensor:
    """One attention projection: affine in classical mode, a circuit in
    quantum mode (shared half-width circuit on both row halves under
    split-halves)."""
    d = cfg.hidden_size
    if cfg.mode == "classical":
        return tn.affine(x, block_params[f"attn.w{key}"], block_params[f"attn.b{key}"])
    theta = block_params[f"attn.theta_{key}"]
    if cfg.qmha_scheme == "per-projection":
        out = qsim.quantum_linear(_circuit(d), theta, x)
    else:
        half = d // 2
        rows = x.shape[0]
        folded = tn.reshape(x, (rows * 2, half))
        out = tn.reshape(qsim.quantum_linear(_circuit(half), theta, folded), (rows, d))
    if cfg.vqc_bias:
        out = tn.add_bias(out, block_params[f"attn.bias_{key}"])
    return out


def qmha(x: Tensor, block_params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Multi-head self-attention with all four projections replaced by the
    configured projection type."""
    if x.shape[-1] != cfg.hidden_size:
        raise ShapeError(f"token width {x.shape[-1]} != hidden size {cfg.hidden_size}")
    q = _project(x, block_params, "q", cfg)
    k = _project(x, block_params, "k", cfg)
    v = _project(x, block_params, "v", cfg)
    sizes = [cfg.head_dim] * cfg.num_heads
    q_heads = tn.split(q, sizes, axis=1)
    k_heads = tn.split(k, sizes, axis=1)
    v_heads = tn.split(v, sizes, axis=1)
    heads = [attention(qh, kh, vh) for qh, kh, vh in zip(q_heads, k_heads, v_heads)]
    merged = tn.concat(heads, axis=1)
    return _project(merged, block_params, "o", cfg)


def _mlp_quantum_stage(x: Tensor, block_params, stage: str, cfg: ModelConfig) -> Tensor:
    d = cfg.hidden_size
    if cfg.qmha_scheme == "per-projection":
        out = qsim.quantum_linear(_circuit(d), block_params[f"mlp.theta{stage}"], x)
    else:
        half = d // 2
        left, right = tn.split(x, [half, half], axis=1)
        out = tn.concat(
            [
                qsim.quantum_linear(_circuit(half), block_params[f"mlp.theta{stage}a"], left),
                qsim.quantum_linear(_circuit(half), block_params[f"mlp.theta{stage}b"], right),
            ],
            axis=1,
        )
    if cfg.vqc_bias:
        out = tn.add_bias(out, block_params[f"mlp.bias{stage}"])
    return out


def qmlp(x: Tensor, block_params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Two-stage MLP with a classical GELU between the stages."""
    if x.shape[-1] != cfg.hidden_size:
        raise ShapeError(f"token width {x.shape[-1]} != hidden size {cfg.hidden_size}")
    if cfg.mode == "classical":
        hidden = tn.affine(x, block_params["mlp.w1"], block_params["mlp.b1"])
        return tn.affine(tn.gelu(hidden), block_params["mlp.w2"], block_params["mlp.b2"])
    hidden = _mlp_quantum_stage(x, block_params, "1", cfg)
    return _mlp_quantum_stage(tn.gelu(hidden), block_params, "2", cfg)


def encoder_block(x: Tensor, block_params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Residual wiring with the norm applied to the sub-layer output."""
    z = tn.add(x, tn.layer_norm(qmha(x, block_params, cfg),
                                block_params["ln1.gamma"], block_params["ln1.beta"]))
    return tn.add(z, tn.layer_norm(qmlp(z, block_params, cfg),
                                   block_params["ln2.gamma"], block_params["ln2.beta"]))


def _class_logits(tokens: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    cls = tn.split(tokens, [1, cfg.num_patches], axis=0)[0]
    return tn.affine(cls, params.get("head.weight"), params.get("head.bias"))


def forward(image: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Logits for one image, shape (num_classes,). Softmax is applied only
    inside the loss and the metrics."""
    tokens = embed(extract_patches(image, cfg), params, cfg)
    for b in range(cfg.num_blocks):
        tokens = encoder_block(tokens, params.group(f"block{b}."), cfg)
    return tn.reshape(_class_logits(tokens, params, cfg), (cfg.num_classes,))


def forward_batch(images: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Logits for a stack of images, shape (batch, num_classes)."""
    rows = []
    for image in images:
        tokens = embed(extract_patches(image, cfg), params, cfg)
        for b in range(cfg.num_blocks):
            tokens = encoder_block(tokens, params.group(f"block{b}."), cfg)
        rows.append(_class_logits(tokens, params, cfg))
    return tn.concat(rows, axis=0)


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(directory, cfg: ModelConfig, params: ParamStore, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "registry": [{"name": n, "shape": list(s)} for n, s in params.shapes()],
    }
    doc.update(meta or {})
    (directory / META_FILE).write_text(json.dumps(doc, indent=2) + "\n")
    data = params.state_vector().astype("<f8")
    (directory / PARAMS_FILE).write_bytes(data.tobytes())


def load_checkpoint(directory) -> tuple[ModelConfig, ParamStore, dict]:
    directory = Path(directory)
    meta_path = directory / META_FILE
    bin_path = directory / PARAMS_FILE
    if not meta_path.is_file() or not bin_path.is_file():
        raise CorruptionError(f"checkpoint at {directory} is missing {META_FILE} or {PARAMS_FILE}")
    doc = json.loads(meta_path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CorruptionError(f"unsupported checkpoint format {doc.get('format')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    expected = [(e["name"], tuple(e["shape"])) for e in doc["registry"]]
    store = init_params(cfg, seed=0)
    if store.shapes() != expected:
        raise CorruptionError("checkpoint registry does not match the configured model")
    raw = bin_path.read_bytes()
    values = np.frombuffer(raw, dtype="<f8")
    if values.size != store.total_params():
        raise CorruptionError(
            f"params.bin holds {values.size} values, registry expects {store.total_params()}"
        )
    store.load_state_vector(values)
    return cfg, store, doc
