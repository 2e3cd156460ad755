"""Siamese verifier: small encoder, hourglass pyramid, per-scale matching heads.

Images are ``3×64×32`` (height 64, width 32).  The encoder's three stride-2
stages give maps at ``32×16``, ``16×8`` and ``8×4``; the hourglass decoder
rebuilds the finer scales from the coarsest one, halving channels at each
step.  Every scale runs matching, warping, attention-weighted reduction and
a square + batch-norm, and a single linear layer scores the concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kpm, ops
from .attention import AttentionMap, init_rsa, rsa_forward, weighted_reduce
from .errors import DimensionError, ParameterError
from .nn import Layers, ParamSet
from .tensor import Tape, Tensor

INPUT_SHAPE = (3, 64, 32)
SCALE_SIZES = {1: (8, 4), 2: (16, 8), 3: (32, 16)}
MATCHING_MODES = ("warp", "nowarp", "none")
SIMILARITY_SCALES = ("channels", "sqrt", "none")


@dataclass(frozen=True)
class ModelConfig:
    # encoder widths at 32×16, 16×8 and 8×4
    channels: tuple[int, int, int] = (32, 64, 128)
    stage_depth: int = 1
    rsa_hidden: int = 64
    tau_kpm: float = kpm.DEFAULT_TAU_KPM
    tau_rsa: float = 1.0
    matching: str = "warp"
    attention: bool = True
    hourglass: bool = True
    square: str = "after"
    fc_init_std: float = 0.01
    # divide similarities by C_s ("channels"), sqrt(C_s) ("sqrt") or nothing ("none")
    similarity_scale: str = "channels"

    def __post_init__(self):
        c3, c2, c1 = self.channels
        if not (0 < c3 <= c2 <= c1) or c1 % 4:
            raise ParameterError(f"channel profile {self.channels} must be non-decreasing with C1 divisible by 4")
        if self.matching not in MATCHING_MODES:
            raise ParameterError(f"matching must be one of {MATCHING_MODES}")
        if self.square not in ("after", "before"):
            raise ParameterError("square must be 'after' or 'before'")
        if not (self.tau_kpm > 0 and self.tau_rsa > 0):
            raise ParameterError("temperatures must be positive")
        if self.similarity_scale not in SIMILARITY_SCALES:
            raise ParameterError(f"similarity_scale must be one of {SIMILARITY_SCALES}")
        if self.stage_depth < 1 or self.rsa_hidden < 1:
            raise ParameterError("stage_depth and rsa_hidden must be positive")

    @property
    def scales(self) -> tuple[int, ...]:
        return (1, 2, 3) if self.hourglass else (1,)

    def scale_channels(self, s: int) -> int:
        return self.channels[2] // 2 ** (s - 1)

    def match_temperature(self, s: int) -> float:
        """Softmax temperature applied to raw similarities at scale ``s``."""
        c = self.scale_channels(s)
        factor = {"channels": c, "sqrt": c ** 0.5, "none": 1}[self.similarity_scale]
        return self.tau_kpm * factor


@dataclass
class PairVerdict:
    logit: float
    probability: float
    scale_vectors: list[np.ndarray]
    diagnostics: dict | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    scale_vectors: list[Tensor]
    matches: list[kpm.MatchKernel | None] = field(default_factory=list)
    attentions: list[AttentionMap | None] = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return logistic(self.logits.data)


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ----------------------------------------------------------------------------
# parameters

def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ParamSet:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    p = ParamSet()
    c_in = INPUT_SHAPE[0]
    for stage, c_out in zip((1, 2, 3), config.channels):
        for block in range(config.stage_depth):
            name = f"enc.s{stage}.b{block}"
            p.conv(rng, f"{name}.conv", c_out, c_in, 3)
            p.bn(f"{name}.bn", c_out)
            c_in = c_out
    c3, c2, c1 = config.channels
    if config.hourglass:
        p.conv(rng, "hg.reduce2", c1 // 2, c1, 1, bias=True)
        p.conv(rng, "hg.skip2", c1 // 2, c2, 1, bias=True)
        p.conv(rng, "hg.reduce3", c1 // 4, c1 // 2, 1, bias=True)
        p.conv(rng, "hg.skip3", c1 // 4, c3, 1, bias=True)
    total = 0
    for s in config.scales:
        cs = config.scale_channels(s)
        if config.matching == "nowarp":
            h, w = SCALE_SIZES[s]
            p.conv(rng, f"head{s}.conf.conv", cs, h * w, 1)
            p.bn(f"head{s}.conf.bn", cs)
        elif config.attention:
            init_rsa(p, rng, f"head{s}.rsa", cs, config.rsa_hidden)
        p.bn(f"head{s}.bn", cs)
        total += cs
    p.linear(rng, "fc", 1, total, std=config.fc_init_std)
    return p


def check_params(params: ParamSet, config: ModelConfig) -> None:
    """Raise :class:`ParameterError` unless ``params`` fit the architecture of ``config``."""
    expected = {k: v.shape for k, v in init_params(config, 0).all_arrays().items()}
    found = {k: v.shape for k, v in params.all_arrays().items()}
    missing = sorted(expected.keys() - found.keys())
    extra = sorted(found.keys() - expected.keys())
    wrong = sorted(k for k in expected.keys() & found.keys() if expected[k] != found[k])
    if missing or extra or wrong:
        parts = [f"{label}: {', '.join(names[:3])}{' ...' if len(names) > 3 else ''}"
                 for label, names in (("missing", missing), ("unexpected", extra), ("shape mismatch", wrong))
                 if names]
        raise ParameterError("parameters do not fit the model config (" + "; ".join(parts) + ")")


# ----------------------------------------------------------------------------
# forward

def as_image_batch(imgs: np.ndarray) -> np.ndarray:
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"images must be 3×64×32 (optionally batched), got {imgs.shape}")
    return imgs


def encode(images, layers: Layers, config: ModelConfig) -> list[Tensor]:
    """Encoder maps at ``32×16``, ``16×8`` and ``8×4`` (finest first)."""
    x = images if isinstance(images, Tensor) else Tensor(as_image_batch(images))
    if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"images must be N×3×64×32, got {x.shape}")
    feats = []
    for stage in (1, 2, 3):
        for block in range(config.stage_depth):
            x = layers.conv_bn_relu(x, f"enc.s{stage}.b{block}", stride=2 if block == 0 else 1, pad=1)
        feats.append(x)
    return feats


def hourglass_decode(feats: Sequence[Tensor], layers: Layers, config: ModelConfig) -> dict[int, Tensor]:
    """Pyramid ``{1: 8×4, 2: 16×8, 3: 32×16}`` from encoder maps (finest first)."""
    f3, f2, f1 = feats
    pyramid = {1: f1}
    if not config.hourglass:
        return pyramid
    for s, skip in ((2, f2), (3, f3)):
        coarse = pyramid[s - 1]
        up = ops.bilinear_upsample_x2(layers.conv(coarse, f"hg.reduce{s}"))
        lateral = layers.conv(skip, f"hg.skip{s}")
        if up.shape != lateral.shape:
            raise DimensionError(f"hourglass scale {s}: {up.shape} vs {lateral.shape}")
        pyramid[s] = ops.add(up, lateral)
    return pyramid


def scale_head(x: Tensor, y: Tensor, layers: Layers, config: ModelConfig, s: int):
    """Per-scale difference vector ``BN(square(Σ (1 + ã) (X - warp(Y))))``.

    Returns ``(vector, match_kernel, attention_map)``; the last two are None
    when the configuration skips that stage.
    """
    if x.shape != y.shape:
        raise DimensionError(f"scale {s}: feature maps differ {x.shape} vs {y.shape}")
    n, c, h, w = x.shape
    km = att = None
    if config.matching == "nowarp":
        km = kpm.normalize_matching(kpm.similarity_matrix(x, y), config.match_temperature(s))
        # confidence maps as M_y channels laid over the reference grid
        conf = ops.reshape(ops.transpose(km.normalized, (0, 2, 1)), (n, h * w, h, w))
        v = ops.global_average_pool(layers.conv_bn_relu(conf, f"head{s}.conf"))
        return layers.bn(v, f"head{s}.bn"), km, None

    if config.matching == "warp":
        delta, km = kpm.match(x, y, config.match_temperature(s))
    else:
        delta = kpm.difference_map(x, y)
    if config.square == "before":
        delta = ops.square(delta)
    if config.attention:
        att = rsa_forward(x, layers, f"head{s}.rsa", config.tau_rsa)
        v = weighted_reduce(delta, att)
    else:
        v = ops.global_average_pool(delta)
    if config.square == "after":
        v = ops.square(v)
    return layers.bn(v, f"head{s}.bn"), km, att


def fuse_and_classify(vectors: Sequence[Tensor], layers: Layers) -> Tensor:
    fused = vectors[0] if len(vectors) == 1 else ops.concat(vectors, axis=1)
    expected = layers.w["fc.weight"].shape[1]
    if fused.ndim != 2 or fused.shape[1] != expected:
        raise DimensionError(f"classifier expects {expected} features, got {fused.shape}")
    return ops.reshape(layers.linear(fused, "fc"), (fused.shape[0],))


def pyramids(images, layers: Layers, config: ModelConfig) -> dict[int, Tensor]:
    return hourglass_decode(encode(images, layers, config), layers, config)


def heads_from_pyramids(pa: dict[int, Tensor], pb: dict[int, Tensor], layers: Layers,
                        config: ModelConfig) -> ForwardResult:
    vectors, matches, atts = [], [], []
    for s in config.scales:
        v, km, att = scale_head(pa[s], pb[s], layers, config, s)
        vectors.append(v)
        matches.append(km)
        atts.append(att)
    return ForwardResult(fuse_and_classify(vectors, layers), vectors, matches, atts)


def forward_batch(imgs_a, imgs_b, layers: Layers, config: ModelConfig) -> ForwardResult:
    """Score ``N`` pairs.  Both branches share ``layers``; ``imgs_a`` is the reference."""
    a, b = as_image_batch(imgs_a), as_image_batch(imgs_b)
    if a.shape != b.shape:
        raise DimensionError(f"image batches differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    both = pyramids(Tensor(np.concatenate([a, b])), layers, config)
    pa = {s: ops.narrow(t, 0, 0, n) for s, t in both.items()}
    pb = {s: ops.narrow(t, 0, n, 2 * n) for s, t in both.items()}
    return heads_from_pyramids(pa, pb, layers, config)


def verdict(result: ForwardResult, index: int = 0, diagnostics: bool = False) -> PairVerdict:
    logit = float(result.logits.data[index])
    diag = None
    if diagnostics:
        diag = {}
        for s, km, att in zip(sorted(SCALE_SIZES)[: len(result.matches)], result.matches, result.attentions):
            diag[s] = {
                "match": None if km is None else km.normalized.data[index].copy(),
                "entropy": None if km is None else kpm.match_entropy(km)[index].copy(),
                "attention": None if att is None else att.normalized.data[index, 0].copy(),
            }
    return PairVerdict(
        logit=logit,
        probability=float(logistic(logit)),
        scale_vectors=[v.data[index].copy() for v in result.scale_vectors],
        diagnostics=diag,
    )


def forward_pair(img_a, img_b, params: ParamSet, config: ModelConfig, diagnostics: bool = False,
                 symmetric: bool = False) -> PairVerdict:
    """Eval-mode verdict for one pair.

    ``symmetric`` averages the logits of both orderings; matching is
    one-directional, so the two orders generally disagree.
    """
    layers = Layers(params, train=False)
    out = verdict(forward_batch(img_a, img_b, layers, config), 0, diagnostics)
    if symmetric:
        rev = forward_batch(img_b, img_a, layers, config)
        out.logit = 0.5 * (out.logit + float(rev.logits.data[0]))
        out.probability = float(logistic(out.logit))
    return out


def loss_and_grads(params: ParamSet, config: ModelConfig, imgs_a, imgs_b, labels, loss_fn):
    """Train-mode forward, loss and gradients for one batch.

    Updates batch-norm running statistics in ``params`` as a side effect.
    """
    tape = Tape()
    layers = Layers(params, train=True, tape=tape)
    result = forward_batch(imgs_a, imgs_b, layers, config)
    loss = loss_fn(result.logits, labels)
    grads = tape.backward(output=loss)
    return loss.item(), {k: grads[t] for k, t in layers.w.items()}, result
