"""
Tiny frozen dual encoder with layer-wise prompt propagation.

The text tower turns template-instantiated label names into class embeddings.
The video tower runs divided space-time blocks over a T x S token grid. Base
weights are regenerated from (seed, EncoderConfig) and never trained; all
trainable state lives in ``ComponentPromptSet``.

Naming follows the usual prompt-learning notation: depth K, width d,
L_t / L_v text and video prompt lengths, T frames of S patches.
"""
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from utils.errors import ChecksumError, ConfigError, DimensionError, LabelError, ParameterError, TemplateError
from utils.numerics import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    mean,
    no_grad,
    parameter,
    reshape,
    scale,
    softmax,
    swap_last,
    transpose,
)
from utils.vocabulary import embed_text

logger = logging.getLogger(__name__)

CLASS_PLACEHOLDER = "[CLASS]"
COMPONENTS = ("verb", "noun")
DEFAULT_TEMPLATES = {
    "verb": "a video of a [CLASS] action",
    "noun": "a video of actioning on [CLASS]",
}
PROMPT_INIT_MODES = ("normal", "zeros", "template")
FROZEN_STD = 0.02
PROMPT_STD = 0.02
MASK_FILL = -1e9


@dataclass
class EncoderConfig:
    depth: int = 2
    width: int = 32
    heads: int = 4
    text_prompt_len: int = 4
    video_prompt_len: int = 4
    frames: int = 4
    patches: int = 4
    deep_prompting: bool = True
    mlp_ratio: int = 4
    max_text_len: int = 32
    prompt_init: str = "normal"
    projection_hidden: int = 0

    def validate(self) -> "EncoderConfig":
        for key in ("depth", "width", "heads", "text_prompt_len", "video_prompt_len",
                    "frames", "patches", "mlp_ratio", "max_text_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"encoder.{key}", f"must be >= 1, got {getattr(self, key)}")
        if self.width % self.heads:
            raise ConfigError("encoder.heads", f"width {self.width} is not divisible by {self.heads} heads")
        if self.projection_hidden < 0:
            raise ConfigError("encoder.projection_hidden", "must be >= 0")
        if self.prompt_init not in PROMPT_INIT_MODES:
            raise ConfigError("encoder.prompt_init", f"expected one of {PROMPT_INIT_MODES}, got {self.prompt_init!r}")
        if self.text_prompt_len + 2 > self.max_text_len:
            raise ConfigError("encoder.max_text_len", "leaves no room for template tokens")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


class FrozenEncoders:
    """Seeded base weights for both towers. Read-only during training."""

    def __init__(self, cfg: EncoderConfig, seed: int, weights: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.seed = seed
        self.weights: Dict[str, Tensor] = {name: Tensor._wrap(arr) for name, arr in weights.items()}

    def w(self, name: str) -> Tensor:
        return self.weights[name]

    def parameter_count(self) -> int:
        return int(sum(t.values.size for t in self.weights.values()))

    def checksum(self) -> int:
        crc = 0
        for name in sorted(self.weights):
            crc = zlib.crc32(name.encode("utf-8"), crc)
            crc = zlib.crc32(self.weights[name].values.astype("<f4").tobytes(), crc)
        return crc

    def verify_checksum(self, expected: int) -> None:
        actual = self.checksum()
        if actual != expected:
            raise ChecksumError(f"frozen encoder checksum {actual:#010x} does not match recorded {expected:#010x}")


def _build_frozen_weights(seed: int, cfg: EncoderConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = cfg.width
    hidden = cfg.width * cfg.mlp_ratio
    weights: Dict[str, np.ndarray] = {}

    def gauss(name, shape):
        weights[name] = rng.normal(0.0, FROZEN_STD, size=shape).astype(np.float32)

    def zeros(name, shape):
        weights[name] = np.zeros(shape, dtype=np.float32)

    def norm(prefix):
        weights[f"{prefix}.gamma"] = np.ones(d, dtype=np.float32)
        zeros(f"{prefix}.beta", (d,))

    def attention(prefix):
        for proj in ("q", "k", "v", "o"):
            gauss(f"{prefix}.w{proj}", (d, d))
            zeros(f"{prefix}.b{proj}", (d,))

    def mlp(prefix):
        gauss(f"{prefix}.w1", (d, hidden))
        zeros(f"{prefix}.b1", (hidden,))
        gauss(f"{prefix}.w2", (hidden, d))
        zeros(f"{prefix}.b2", (d,))

    gauss("text.pos", (cfg.max_text_len, d))
    gauss("text.eos", (d,))
    for k in range(cfg.depth):
        norm(f"text.{k}.ln_attn")
        attention(f"text.{k}.attn")
        norm(f"text.{k}.ln_mlp")
        mlp(f"text.{k}.mlp")
    norm("text.ln_final")

    gauss("video.time_pos", (cfg.frames, d))
    gauss("video.space_pos", (cfg.patches, d))
    for k in range(cfg.depth):
        norm(f"video.{k}.ln_time")
        attention(f"video.{k}.time_attn")
        norm(f"video.{k}.ln_space")
        attention(f"video.{k}.space_attn")
        norm(f"video.{k}.ln_mlp")
        mlp(f"video.{k}.mlp")
    return weights


def init_frozen_encoders(seed: int, cfg: EncoderConfig) -> FrozenEncoders:
    cfg.validate()
    encoders = FrozenEncoders(cfg, seed, _build_frozen_weights(seed, cfg))
    logger.debug("frozen encoders: seed=%d params=%d checksum=%#010x",
                 seed, encoders.parameter_count(), encoders.checksum())
    return encoders


# ---------------------------------------------------------------------------
# trainable prompt state
# ---------------------------------------------------------------------------

@dataclass
class ComponentPromptSet:
    """Per-layer text prompts and text-to-video prompt maps for one component.

    ``proj_weights``/``proj_biases`` hold the token-wise d->d map of each layer
    (or its first layer when ``hidden_weights`` is populated). ``resample`` is a
    fixed L_v x L_t matrix, None when the two lengths agree.
    """

    component: str
    text_prompts: List[Tensor]
    proj_weights: List[Tensor]
    proj_biases: List[Tensor]
    hidden_weights: List[Tensor] = field(default_factory=list)
    hidden_biases: List[Tensor] = field(default_factory=list)
    resample: Optional[Tensor] = None

    @property
    def depth(self) -> int:
        return len(self.text_prompts)

    def parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for k in range(self.depth):
            named[f"{self.component}.text_prompt.{k}"] = self.text_prompts[k]
            named[f"{self.component}.proj.{k}.weight"] = self.proj_weights[k]
            named[f"{self.component}.proj.{k}.bias"] = self.proj_biases[k]
            if self.hidden_weights:
                named[f"{self.component}.proj.{k}.weight2"] = self.hidden_weights[k]
                named[f"{self.component}.proj.{k}.bias2"] = self.hidden_biases[k]
        return named


def _resample_matrix(text_len: int, video_len: int) -> Optional[np.ndarray]:
    if text_len == video_len:
        return None
    matrix = np.zeros((video_len, text_len), dtype=np.float32)
    for i in range(video_len):
        u = i * (text_len - 1) / (video_len - 1) if video_len > 1 else (text_len - 1) / 2.0
        lo = int(np.floor(u))
        hi = min(lo + 1, text_len - 1)
        frac = u - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def _template_prompt_rows(template: str, cfg: EncoderConfig, rng: np.random.Generator) -> np.ndarray:
    rows = embed_text(template.replace(CLASS_PLACEHOLDER, " "), cfg.width)[: cfg.text_prompt_len]
    missing = cfg.text_prompt_len - rows.shape[0]
    if missing > 0:
        rows = np.concatenate([rows, rng.normal(0.0, PROMPT_STD, size=(missing, cfg.width))])
    return rows.astype(np.float32)


def init_prompt_set(component: str, cfg: EncoderConfig, seed: int,
                    template: Optional[str] = None) -> ComponentPromptSet:
    if component not in COMPONENTS:
        raise ParameterError(f"unknown component {component!r}")
    cfg.validate()
    rng = np.random.default_rng([seed, COMPONENTS.index(component)])
    d, lt = cfg.width, cfg.text_prompt_len
    template = template or DEFAULT_TEMPLATES[component]

    text_prompts, weights, biases, weights2, biases2 = [], [], [], [], []
    for k in range(cfg.depth):
        if cfg.prompt_init == "zeros":
            rows = np.zeros((lt, d), dtype=np.float32)
        elif cfg.prompt_init == "template":
            rows = _template_prompt_rows(template, cfg, rng)
        else:
            rows = rng.normal(0.0, PROMPT_STD, size=(lt, d))
        text_prompts.append(parameter(rows, name=f"{component}.text_prompt.{k}"))

        if cfg.projection_hidden:
            h = cfg.projection_hidden
            weights.append(parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))))
            biases.append(parameter(np.zeros(h)))
            weights2.append(parameter(rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, d))))
            biases2.append(parameter(np.zeros(d)))
        else:
            weights.append(parameter(np.eye(d) + rng.normal(0.0, PROMPT_STD, size=(d, d))))
            biases.append(parameter(np.zeros(d)))

    resample = _resample_matrix(lt, cfg.video_prompt_len)
    return ComponentPromptSet(
        component=component,
        text_prompts=text_prompts,
        proj_weights=weights,
        proj_biases=biases,
        hidden_weights=weights2,
        hidden_biases=biases2,
        resample=None if resample is None else Tensor(resample),
    )


@dataclass
class ClassEmbeddingTable:
    component: str
    embeddings: Tensor
    source: str
    labels: List[str]

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def normalized(self) -> Tensor:
        return l2_normalize(self.embeddings, axis=-1)


# ---------------------------------------------------------------------------
# shared transformer pieces
# ---------------------------------------------------------------------------

def _swap(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, (n, d) = x.shape[:-2], x.shape[-2:]
    return _swap(reshape(x, lead + (n, heads, d // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = _swap(x, -3, -2)
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _norm(enc: FrozenEncoders, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, enc.w(f"{prefix}.gamma"), enc.w(f"{prefix}.beta"))


def _attention(enc: FrozenEncoders, prefix: str, x: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of x."""
    heads = enc.cfg.heads
    q = _split_heads(linear(x, enc.w(f"{prefix}.wq"), enc.w(f"{prefix}.bq")), heads)
    k = _split_heads(linear(x, enc.w(f"{prefix}.wk"), enc.w(f"{prefix}.bk")), heads)
    v = _split_heads(linear(x, enc.w(f"{prefix}.wv"), enc.w(f"{prefix}.bv")), heads)
    scores = scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if key_mask is not None:
        scores = scores + key_mask
    out = matmul(softmax(scores, axis=-1), v)
    return linear(_merge_heads(out), enc.w(f"{prefix}.wo"), enc.w(f"{prefix}.bo"))


def _mlp(enc: FrozenEncoders, prefix: str, x: Tensor) -> Tensor:
    h = gelu(linear(x, enc.w(f"{prefix}.w1"), enc.w(f"{prefix}.b1")))
    return linear(h, enc.w(f"{prefix}.w2"), enc.w(f"{prefix}.b2"))


def _tile_prompts(prompt: Tensor, batch: int) -> Tensor:
    length, d = prompt.shape
    return broadcast_to(reshape(prompt, (1, length, d)), (batch, length, d))


# ---------------------------------------------------------------------------
# text tower
# ---------------------------------------------------------------------------

def _text_inputs(enc: FrozenEncoders, labels: Sequence[str], template: str):
    if CLASS_PLACEHOLDER not in template:
        raise TemplateError(f"template {template!r} has no {CLASS_PLACEHOLDER} placeholder")
    if not labels:
        raise LabelError("no label names to encode")
    cfg = enc.cfg
    d, lt = cfg.width, cfg.text_prompt_len
    rows = [embed_text(template.replace(CLASS_PLACEHOLDER, f" {name} "), d) for name in labels]
    for name, r in zip(labels, rows):
        if r.shape[0] == 0:
            raise TemplateError(f"template {template!r} with label {name!r} produces no tokens")
    content_len = max(r.shape[0] for r in rows)
    seq_len = lt + content_len + 1
    if seq_len > cfg.max_text_len:
        raise DimensionError(f"text sequence of {seq_len} tokens exceeds max_text_len={cfg.max_text_len}")

    eos = enc.w("text.eos").values
    body = np.zeros((len(labels), content_len + 1, d), dtype=np.float32)
    mask = np.zeros((len(labels), 1, 1, seq_len), dtype=np.float32)
    for i, r in enumerate(rows):
        body[i, : r.shape[0]] = r
        body[i, -1] = eos + r.mean(axis=0)
        mask[i, 0, 0, lt + r.shape[0]: seq_len - 1] = MASK_FILL
    body += enc.w("text.pos").values[lt:seq_len]
    return body, mask


def _run_text_tower(enc: FrozenEncoders, layer_prompts: Sequence[Tensor], body: np.ndarray,
                    mask: np.ndarray) -> Tensor:
    cfg = enc.cfg
    n, lt = body.shape[0], cfg.text_prompt_len
    key_mask = as_tensor(mask)
    x = concat([_tile_prompts(layer_prompts[0], n), as_tensor(body)], axis=1)
    for k in range(cfg.depth):
        if k > 0 and cfg.deep_prompting:
            x = concat([_tile_prompts(layer_prompts[k], n), x[:, lt:, :]], axis=1)
        x = x + _attention(enc, f"text.{k}.attn", _norm(enc, f"text.{k}.ln_attn", x), key_mask)
        x = x + _mlp(enc, f"text.{k}.mlp", _norm(enc, f"text.{k}.ln_mlp", x))
    return _norm(enc, "text.ln_final", x[:, -1, :])


def encode_text_classes(enc: FrozenEncoders, prompts: ComponentPromptSet, labels: Sequence[str],
                        template: Optional[str] = None) -> ClassEmbeddingTable:
    """Learned class table W^c: one end-of-sequence embedding per label."""
    template = template or DEFAULT_TEMPLATES[prompts.component]
    body, mask = _text_inputs(enc, labels, template)
    embeddings = _run_text_tower(enc, prompts.text_prompts, body, mask)
    return ClassEmbeddingTable(prompts.component, embeddings, "learned", list(labels))


def encode_handcrafted_classes(enc: FrozenEncoders, labels: Sequence[str], template: str,
                               component: str) -> ClassEmbeddingTable:
    """Frozen-template table: the text tower with all prompt slots zeroed, no graph."""
    cfg = enc.cfg
    body, mask = _text_inputs(enc, labels, template)
    zero_prompts = [Tensor(np.zeros((cfg.text_prompt_len, cfg.width))) for _ in range(cfg.depth)]
    with no_grad():
        embeddings = _run_text_tower(enc, zero_prompts, body, mask)
    return ClassEmbeddingTable(component, embeddings.detach(), "frozen-template", list(labels))


# ---------------------------------------------------------------------------
# video tower
# ---------------------------------------------------------------------------

def _map_layer(prompts: ComponentPromptSet, k: int) -> Tensor:
    p = prompts.text_prompts[k]
    if prompts.resample is not None:
        p = matmul(prompts.resample, p)
    p = linear(p, prompts.proj_weights[k], prompts.proj_biases[k])
    if prompts.hidden_weights:
        p = linear(gelu(p), prompts.hidden_weights[k], prompts.hidden_biases[k])
    return p


def map_text_prompts_to_video(prompts: ComponentPromptSet) -> List[Tensor]:
    """p_v^k for every layer, recomputed from the current text prompts."""
    return [_map_layer(prompts, k) for k in range(prompts.depth)]


def divided_spacetime_block(enc: FrozenEncoders, e: Tensor, layer: int) -> Tensor:
    """One pre-norm block over T*S patch tokens followed by L_v prompt tokens.

    Temporal attention mixes frames at a fixed patch index and skips the prompt
    tokens. Spatial attention runs per frame over that frame's patches plus the
    prompts; each prompt keeps the mean of its per-frame updates.
    """
    cfg = enc.cfg
    t, s, lv, d = cfg.frames, cfg.patches, cfg.video_prompt_len, cfg.width
    e = as_tensor(e)
    single = e.ndim == 2
    if single:
        e = reshape(e, (1,) + e.shape)
    if e.ndim != 3 or e.shape[1:] != (t * s + lv, d):
        raise DimensionError(f"video block expects (..., {t * s + lv}, {d}) tokens, got {e.shape}")
    b = e.shape[0]
    pfx = f"video.{layer}"

    grid = reshape(e[:, : t * s, :], (b, t, s, d))
    prompt_tokens = e[:, t * s:, :]

    by_patch = transpose(_norm(enc, f"{pfx}.ln_time", grid), (0, 2, 1, 3))
    grid = grid + transpose(_attention(enc, f"{pfx}.time_attn", by_patch), (0, 2, 1, 3))

    normed_prompts = reshape(_norm(enc, f"{pfx}.ln_space", prompt_tokens), (b, 1, lv, d))
    frame_tokens = concat([_norm(enc, f"{pfx}.ln_space", grid),
                           broadcast_to(normed_prompts, (b, t, lv, d))], axis=2)
    spatial = _attention(enc, f"{pfx}.space_attn", frame_tokens)
    grid = grid + spatial[:, :, :s, :]
    prompt_tokens = prompt_tokens + mean(spatial[:, :, s:, :], axis=1)

    grid = grid + _mlp(enc, f"{pfx}.mlp", _norm(enc, f"{pfx}.ln_mlp", grid))
    prompt_tokens = prompt_tokens + _mlp(enc, f"{pfx}.mlp", _norm(enc, f"{pfx}.ln_mlp", prompt_tokens))

    out = concat([reshape(grid, (b, t * s, d)), prompt_tokens], axis=1)
    return reshape(out, out.shape[1:]) if single else out


def encode_video(enc: FrozenEncoders, tokens, prompts: ComponentPromptSet) -> Tensor:
    """Component feature f_c: mean-pooled patch outputs, L2-normalised.

    ``tokens`` is (T, S, d) for one clip or (B, T, S, d) for a batch.
    """
    cfg = enc.cfg
    t, s, d = cfg.frames, cfg.patches, cfg.width
    grid = tokens.values if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float32)
    single = grid.ndim == 3
    if single:
        grid = grid[None]
    if grid.ndim != 4 or grid.shape[1:] != (t, s, d):
        raise DimensionError(f"video tokens must be (B, {t}, {s}, {d}), got {grid.shape}")
    b = grid.shape[0]
    grid = grid + enc.w("video.time_pos").values[None, :, None, :] + enc.w("video.space_pos").values[None, None]

    x = concat([as_tensor(grid.reshape(b, t * s, d)), _tile_prompts(_map_layer(prompts, 0), b)], axis=1)
    for k in range(cfg.depth):
        if k > 0 and cfg.deep_prompting:
            x = concat([x[:, : t * s, :], _tile_prompts(_map_layer(prompts, k), b)], axis=1)
        x = divided_spacetime_block(enc, x, k)
    feature = l2_normalize(mean(x[:, : t * s, :], axis=1), axis=-1)
    return reshape(feature, (d,)) if single else feature
