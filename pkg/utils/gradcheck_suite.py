"""
Named finite-difference checks for every differentiable building block.

Each case builds a small random instance, returns a scalar-valued closure and
its leaves, and is checked with ``grad_check``. Instances are drawn so that no
evaluation point sits on a kink: |x| inputs are pushed away from zero, pool
prompts are kept away from orthogonality, and frequency rankings keep a margin
at the top-k/bottom-k boundary.

Cases whose forward pass runs an encoder perturb a seeded sample of their
leaf elements by default.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.encoders import (
    COMPONENTS,
    DEFAULT_TEMPLATES,
    ClassEmbeddingTable,
    EncoderConfig,
    divided_spacetime_block,
    encode_handcrafted_classes,
    encode_text_classes,
    encode_video,
    init_frozen_encoders,
    init_prompt_set,
    map_text_prompts_to_video,
)
from utils.errors import UsageError
from utils.numerics import (
    Tensor,
    broadcast_to,
    concat,
    cosine_matrix,
    cosine_similarity,
    exp,
    gather,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    parameter,
    reshape,
    softmax_temp,
    tabs,
    tanh,
    transpose,
    tsum,
)
from utils.objectives import (
    LossWeights,
    component_ce_loss,
    freq_reg_loss,
    kg_loss,
    orth_loss,
    stage1_loss,
    unified_loss,
    window_frequencies,
)
from utils.prompt_pool import (
    PromptPool,
    fuse_patterns,
    gated_features,
    init_projector,
    project_fusion,
    record_selection,
    retrieve_topk,
)

logger = logging.getLogger(__name__)

TINY_ENCODER = EncoderConfig(depth=2, width=8, heads=2, text_prompt_len=2, video_prompt_len=2,
                             frames=2, patches=2, max_text_len=16)
TINY_POOL = 4
TINY_K = 2
TINY_BATCH = 2
VERBS = ["take", "put", "open"]
NOUNS = ["knife", "cup", "plate"]
SMOOTH_MARGIN = 0.05
# elements perturbed per instance for cases whose forward pass runs an encoder
SAMPLED_ELEMENTS = 24

Closure = Callable[[], Tensor]
Builder = Callable[[np.random.Generator], Tuple[Closure, List[Tensor]]]


@dataclass
class GradCase:
    name: str
    group: str
    build: Builder
    max_elements: Optional[int] = None


@dataclass
class CaseResult:
    name: str
    group: str
    instance: int
    max_error: float
    passed: bool
    seconds: float
    elements: int = 0


CASES: Dict[str, GradCase] = {}


def case(name: str, group: str, max_elements: Optional[int] = None):
    def register(fn: Builder) -> Builder:
        CASES[name] = GradCase(name, group, fn, max_elements)
        return fn
    return register


def _leaf(rng, shape, name=None):
    return parameter(rng.uniform(-1.0, 1.0, size=shape), name=name)


def _away_from_zero(rng, shape, margin=0.2):
    u = rng.uniform(-1.0, 1.0, size=shape)
    return parameter(np.sign(u) * (margin + np.abs(u)))


# Each closure ends in a sum against fixed random weights so every output
# entry reaches the scalar.

# ---------------------------------------------------------------------------
# tensor operations
# ---------------------------------------------------------------------------

@case("matmul", "op")
def _matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    return (lambda: tsum(matmul(a, b) * w)), [a, b]


@case("add_broadcast", "op")
def _add(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return (lambda: tsum((a + b) * w)), [a, b]


@case("mul", "op")
def _mul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return (lambda: tsum(a * b * w)), [a, b]


@case("div", "op")
def _div(rng):
    a, b = _leaf(rng, (3, 4)), _away_from_zero(rng, (3, 4), margin=0.5)
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return (lambda: tsum(a / b * w)), [a, b]


@case("softmax_temp_dot", "op")
def _softmax_temp(rng):
    x, m = _leaf(rng, (2, 4)), _leaf(rng, (4, 5))
    w = Tensor(rng.uniform(-1, 1, (2, 5)))
    return (lambda: tsum(softmax_temp(matmul(x, m), 0.07) * w)), [x, m]


@case("log_softmax", "op")
def _log_softmax(rng):
    x = _leaf(rng, (3, 5))
    w = Tensor(rng.uniform(-1, 1, (3, 5)))
    return (lambda: tsum(log_softmax(x) * w)), [x]


@case("layer_norm", "op")
def _layer_norm(rng):
    x, gamma, beta = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    w = Tensor(rng.uniform(-1, 1, (3, 6)))
    return (lambda: tsum(layer_norm(x, gamma, beta) * w)), [x, gamma, beta]


@case("l2_normalize", "op")
def _l2(rng):
    x = _leaf(rng, (3, 5))
    w = Tensor(rng.uniform(-1, 1, (3, 5)))
    return (lambda: tsum(l2_normalize(x) * w)), [x]


@case("cosine_similarity", "op")
def _cos(rng):
    a, b = _leaf(rng, (6,)), _leaf(rng, (6,))
    return (lambda: cosine_similarity(a, b)), [a, b]


@case("cosine_matrix", "op")
def _cos_matrix(rng):
    a, b = _leaf(rng, (3, 5)), _leaf(rng, (4, 5))
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return (lambda: tsum(cosine_matrix(a, b) * w)), [a, b]


@case("elementwise", "op")
def _elementwise(rng):
    x = _leaf(rng, (3, 4))
    pos = parameter(0.5 + rng.uniform(0.0, 1.0, (3, 4)))
    away = _away_from_zero(rng, (3, 4))
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return (lambda: tsum((gelu(x) + tanh(x) + exp(x) + log(pos) + tabs(away)) * w)), [x, pos, away]


@case("gather_getitem", "op")
def _indexing(rng):
    x = _leaf(rng, (4, 5))
    idx = rng.integers(0, 5, size=(4, 2))
    rows = np.array([0, 2, 2])
    w1, w2 = Tensor(rng.uniform(-1, 1, (4, 2))), Tensor(rng.uniform(-1, 1, (3, 3)))
    return (lambda: tsum(gather(x, idx) * w1) + tsum(x[rows, 1:4] * w2)), [x]


@case("shape_ops", "op")
def _shape_ops(rng):
    x, y, z = _leaf(rng, (2, 3)), _leaf(rng, (2, 2)), _leaf(rng, (3, 1))
    w = Tensor(rng.uniform(-1, 1, (5, 2)))
    v = Tensor(rng.uniform(-1, 1, (4,)))

    def f():
        stacked = reshape(transpose(concat([x, y], axis=1)), (5, 2))
        return tsum(stacked * w) + tsum(mean(broadcast_to(z, (3, 4)), axis=0) * v)

    return f, [x, y, z]


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def _tiny_encoders(cfg: EncoderConfig = TINY_ENCODER):
    return init_frozen_encoders(11, cfg)


def _prompt_leaves(prompts) -> List[Tensor]:
    return list(prompts.parameters().values())


@case("text_tower", "encoder", SAMPLED_ELEMENTS)
def _text_tower(rng):
    enc = _tiny_encoders()
    prompts = init_prompt_set("verb", TINY_ENCODER, int(rng.integers(1000)))
    for p in prompts.text_prompts:
        p.values = rng.uniform(-1, 1, p.shape).astype(np.float32)
    w = Tensor(rng.uniform(-1, 1, (len(VERBS), TINY_ENCODER.width)))
    return (lambda: tsum(encode_text_classes(enc, prompts, VERBS).embeddings * w)), list(prompts.text_prompts)


@case("prompt_mapping", "encoder", SAMPLED_ELEMENTS)
def _mapping(rng):
    prompts = init_prompt_set("noun", TINY_ENCODER, int(rng.integers(1000)))
    w = Tensor(rng.uniform(-1, 1, (TINY_ENCODER.depth * TINY_ENCODER.video_prompt_len, TINY_ENCODER.width)))
    return (lambda: tsum(concat(map_text_prompts_to_video(prompts), axis=0) * w)), _prompt_leaves(prompts)


@case("prompt_mapping_mlp", "encoder", SAMPLED_ELEMENTS)
def _mapping_mlp(rng):
    cfg = EncoderConfig(**{**TINY_ENCODER.to_dict(), "projection_hidden": 4, "video_prompt_len": 3})
    prompts = init_prompt_set("noun", cfg, int(rng.integers(1000)))
    w = Tensor(rng.uniform(-1, 1, (cfg.depth * cfg.video_prompt_len, cfg.width)))
    return (lambda: tsum(concat(map_text_prompts_to_video(prompts), axis=0) * w)), _prompt_leaves(prompts)


@case("spacetime_block", "encoder", SAMPLED_ELEMENTS)
def _block(rng):
    cfg = TINY_ENCODER
    enc = _tiny_encoders()
    e = _leaf(rng, (TINY_BATCH, cfg.frames * cfg.patches + cfg.video_prompt_len, cfg.width))
    w = Tensor(rng.uniform(-1, 1, e.shape))
    return (lambda: tsum(divided_spacetime_block(enc, e, 1) * w)), [e]


@case("encode_video", "encoder", SAMPLED_ELEMENTS)
def _video(rng):
    cfg = TINY_ENCODER
    enc = _tiny_encoders()
    prompts = init_prompt_set("verb", cfg, int(rng.integers(1000)))
    tokens = rng.uniform(-1, 1, (TINY_BATCH, cfg.frames, cfg.patches, cfg.width)).astype(np.float32)
    w = Tensor(rng.uniform(-1, 1, (TINY_BATCH, cfg.width)))
    return (lambda: tsum(encode_video(enc, tokens, prompts) * w)), _prompt_leaves(prompts)


# ---------------------------------------------------------------------------
# losses and pool
# ---------------------------------------------------------------------------

def _pool_is_separated(queries: np.ndarray, values: np.ndarray) -> bool:
    off = ~np.eye(queries.shape[0], dtype=bool)
    for m in (queries, values):
        unit = m / np.linalg.norm(m, axis=1, keepdims=True)
        if np.min(np.abs(unit @ unit.T)[off]) < SMOOTH_MARGIN:
            return False
    return True


def _random_pool(rng) -> PromptPool:
    d = TINY_ENCODER.width
    while True:
        q, v = rng.uniform(-1, 1, (TINY_POOL, d)), rng.uniform(-1, 1, (TINY_POOL, d))
        if _pool_is_separated(q, v):
            return PromptPool(parameter(q, name="pool.queries"), parameter(v, name="pool.values"))


@case("component_ce", "loss")
def _ce(rng):
    f = _leaf(rng, (TINY_BATCH, TINY_ENCODER.width))
    table = ClassEmbeddingTable("verb", _leaf(rng, (3, TINY_ENCODER.width)), "learned", VERBS)
    y = rng.integers(0, 3, size=TINY_BATCH)
    return (lambda: component_ce_loss(f, table, y, 0.07)), [f, table.embeddings]


@case("kg_loss", "loss")
def _kg(rng):
    learned = ClassEmbeddingTable("noun", _leaf(rng, (3, TINY_ENCODER.width)), "learned", NOUNS)
    frozen = ClassEmbeddingTable("noun", Tensor(rng.uniform(-1, 1, (3, TINY_ENCODER.width))),
                                 "frozen-template", NOUNS)
    return (lambda: kg_loss(learned, frozen)), [learned.embeddings]


@case("orth_loss", "loss")
def _orth(rng):
    pool = _random_pool(rng)
    return (lambda: orth_loss(pool)), [pool.queries, pool.values]


def _pinned_retrievals(pool: PromptPool, features: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    with no_grad():
        return {c: retrieve_topk(features[c], pool, TINY_K, 0.07, component=c).indices for c in COMPONENTS}


def _window_has_margin(pool: PromptPool, features, fixed, k_freq: int) -> bool:
    pool.reset_window()
    with no_grad():
        for c in COMPONENTS:
            record_selection(retrieve_topk(features[c], pool, TINY_K, 0.07, c, fixed_indices=fixed[c]), pool)
        for c in COMPONENTS:
            s = np.sort(window_frequencies(pool, c).values)[::-1]
            if s[k_freq - 1] - s[k_freq] < SMOOTH_MARGIN or s[-k_freq] - s[-k_freq - 1] < SMOOTH_MARGIN:
                return False
    return True


def _stage2_instance(rng, k_freq: int = 1):
    d = TINY_ENCODER.width
    while True:
        pool = _random_pool(rng)
        features = {c: Tensor(rng.uniform(-1, 1, (TINY_BATCH, d))) for c in COMPONENTS}
        fixed = _pinned_retrievals(pool, features)
        if _window_has_margin(pool, features, fixed, k_freq):
            pool.reset_window()
            return pool, features, fixed


@case("freq_reg_loss", "loss")
def _freq(rng):
    pool, features, fixed = _stage2_instance(rng)

    def f():
        pool.reset_window()
        for c in COMPONENTS:
            record_selection(retrieve_topk(features[c], pool, TINY_K, 0.07, c, fixed_indices=fixed[c]), pool)
        return freq_reg_loss(pool, 1)

    return f, [pool.queries]


@case("retrieve_fuse_project", "loss")
def _fusion_chain(rng):
    pool, features, fixed = _stage2_instance(rng)
    proj = init_projector(TINY_ENCODER.width, int(rng.integers(1000)))
    w = Tensor(rng.uniform(-1, 1, (TINY_BATCH, TINY_ENCODER.width)))

    def f():
        parts = {c: fuse_patterns(retrieve_topk(features[c], pool, TINY_K, 0.07, c, fixed_indices=fixed[c]), pool)
                 for c in COMPONENTS}
        return tsum(project_fusion(parts["verb"], parts["noun"], proj) * w)

    return f, [pool.queries, pool.values, proj.weight, proj.bias]


@case("stage1_objective", "objective", SAMPLED_ELEMENTS)
def _stage1(rng):
    cfg = TINY_ENCODER
    enc = _tiny_encoders()
    seed = int(rng.integers(1000))
    prompts = {c: init_prompt_set(c, cfg, seed) for c in COMPONENTS}
    names = {"verb": VERBS, "noun": NOUNS}
    frozen = {c: encode_handcrafted_classes(enc, names[c], DEFAULT_TEMPLATES[c], c) for c in COMPONENTS}
    tokens = rng.uniform(-1, 1, (TINY_BATCH, cfg.frames, cfg.patches, cfg.width)).astype(np.float32)
    labels = {c: rng.integers(0, 3, size=TINY_BATCH) for c in COMPONENTS}
    weights = LossWeights(k_freq=TINY_K)

    def f():
        features = {c: encode_video(enc, tokens, prompts[c]) for c in COMPONENTS}
        learned = {c: encode_text_classes(enc, prompts[c], names[c]) for c in COMPONENTS}
        return stage1_loss(features, labels, learned, frozen, weights).total

    leaves = [t for c in COMPONENTS for t in prompts[c].parameters().values()]
    return f, leaves


@case("stage2_objective", "objective", SAMPLED_ELEMENTS)
def _stage2(rng):
    pool, features, fixed = _stage2_instance(rng, k_freq=TINY_K)
    proj = init_projector(TINY_ENCODER.width, int(rng.integers(1000)))
    proj.gate.values = rng.uniform(0.5, 1.5, len(COMPONENTS)).astype(np.float32)
    tables = {
        "verb": ClassEmbeddingTable("verb", Tensor(rng.uniform(-1, 1, (3, TINY_ENCODER.width))), "learned", VERBS),
        "noun": ClassEmbeddingTable("noun", Tensor(rng.uniform(-1, 1, (3, TINY_ENCODER.width))), "learned", NOUNS),
    }
    labels = {c: rng.integers(0, 3, size=TINY_BATCH) for c in COMPONENTS}
    weights = LossWeights(k_freq=TINY_K)

    def f():
        pool.reset_window()
        parts = {}
        for c in COMPONENTS:
            r = retrieve_topk(features[c], pool, TINY_K, 0.07, c, fixed_indices=fixed[c])
            record_selection(r, pool)
            parts[c] = fuse_patterns(r, pool)
        fused = project_fusion(parts["verb"], parts["noun"], proj)
        return unified_loss(gated_features(features, fused, proj), labels, tables, pool, weights).total

    return f, [pool.queries, pool.values, proj.weight, proj.bias, proj.gate]


def run_suite(seed: int = 0, instances: int = 1, h: float = 1e-3, tol: float = 1e-3,
              names: Optional[Sequence[str]] = None, exhaustive: bool = False) -> List[CaseResult]:
    """Check every selected case on ``instances`` seeded random instances.

    Encoder and objective cases perturb a seeded sample of their leaf
    elements unless ``exhaustive`` is set; the other cases perturb every
    element.
    """
    selected = list(names) if names else list(CASES)
    unknown = [n for n in selected if n not in CASES]
    if unknown:
        raise UsageError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = []
    for name in selected:
        spec = CASES[name]
        for instance in range(instances):
            rng = np.random.default_rng([seed, instance, sorted(CASES).index(name)])
            started = time.perf_counter()
            f, leaves = spec.build(rng)
            budget = None if exhaustive else spec.max_elements
            report = grad_check(f, leaves, h=h, tol=tol, max_elements=budget, seed=int(rng.integers(2**31)))
            results.append(CaseResult(name, spec.group, instance, report.max_error, report.passed,
                                      time.perf_counter() - started, report.checked))
            logger.debug("gradcheck %s[%d]: max error %.2e", name, instance, report.max_error)
    return results
