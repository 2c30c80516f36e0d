"""The three M3 models (CFP, FAF, CFP-FAF) and the non-M3 baselines.

An :class:`M3Model` holds two backbones, one self-attention module per
modality, the cross-modality attention and three heads. The CFP head and the
fused head read the *same* ``sa_cfp`` object (likewise ``sa_faf``), which is
what makes stage-I training a shared representation.

Baselines (:class:`ScenarioModel` with ``attention=False``) are one backbone
(two for the fused scenario) plus the same head, with token mean-pooling in
place of attention and plain concatenation for fusion.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    CrossModalityAttention,
    SelfAttention,
    TokenGrid,
    cross_modality_attention,
    self_attention,
)
from .tensor import ShapeError, Tensor, concat, conv2d, max_pool2d, mean, no_grad, pad_spatial, relu
from .tensor.nn import Conv, Head, LayerNorm, Module

SCENARIOS = ("cfp", "faf", "fused")
FEATURES = ("rpd", "ga", "pigment")
DEFAULT_BLOCKS = ((4, True), (8, True), (64, True))


@dataclass
class BackboneConfig:
    input_size: int = 64
    blocks: tuple = DEFAULT_BLOCKS
    cfp_channels: int = 3
    faf_channels: int = 1
    head_width: int = 64

    def __post_init__(self):
        self.blocks = tuple((int(c), bool(p)) for c, p in self.blocks)
        if self.input_size < 16:
            raise ValueError(f"input_size must be >= 16, got {self.input_size}")
        if not self.blocks:
            raise ValueError("blocks must not be empty")
        if self.blocks[-1][0] < 4:
            raise ValueError(f"final feature dim must be >= 4, got {self.blocks[-1][0]}")
        for c, _ in self.blocks:
            if c < 4:
                raise ValueError(f"block width must be >= 4, got {c}")
        h = self.input_size
        for _, pool in self.blocks:
            if pool:
                h //= 2
        if h < 1:
            raise ValueError(f"input_size {self.input_size} too small for {len(self.blocks)} pooled blocks")

    @property
    def feature_map(self):
        h = self.input_size
        for _, pool in self.blocks:
            if pool:
                h //= 2
        return (h, h, self.blocks[-1][0])

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d


def _branch_widths(out):
    a = max(1, out // 4)
    c = max(1, out // 4)
    return a, out - a - c, c


# Below this input width the three branches run as one 5x5 conv with the 1x1
# and 3x3 kernels zero-embedded: one im2col and one wider GEMM beat three
# narrow ones. Above it the extra MACs cost more than they save.
FUSE_MAX_CIN = 4


class InceptionBlock(Module):
    """Parallel 1x1 / 3x3 / 5x5 convs (same padding), concatenated, relu, optional 2x2 max pool, layer norm."""

    def __init__(self, seed, name, cin, cout, pool, dtype=np.float32, fuse=None):
        w1, w3, w5 = _branch_widths(cout)
        self.b1 = Conv(seed, f"{name}.b1", 1, cin, w1, dtype=dtype)
        self.b3 = Conv(seed, f"{name}.b3", 3, cin, w3, dtype=dtype)
        self.b5 = Conv(seed, f"{name}.b5", 5, cin, w5, dtype=dtype)
        self.ln = LayerNorm(f"{name}.ln", cout, dtype=dtype)
        self._pool = pool
        self._fuse = cin <= FUSE_MAX_CIN if fuse is None else fuse

    def __call__(self, x):
        """Return (block output, relu activation before pooling)."""
        if self._fuse:
            kernel = concat([pad_spatial(self.b1.w, 2), pad_spatial(self.b3.w, 1), self.b5.w], axis=-1)
            bias = concat([self.b1.b, self.b3.b, self.b5.b], axis=-1)
            pre = conv2d(x, kernel, bias, padding=2)
        else:
            pre = concat([self.b1(x), self.b3(x), self.b5(x)], axis=-1)
        act = relu(pre)
        return self.ln(max_pool2d(act) if self._pool else act), act


class Backbone(Module):
    def __init__(self, seed, name, cfg, in_channels, dtype=np.float32):
        blocks = []
        cin = in_channels
        for i, (cout, pool) in enumerate(cfg.blocks):
            blocks.append(InceptionBlock(seed, f"{name}.block{i}", cin, cout, pool, dtype))
            cin = cout
        self.blocks = blocks
        self._size = cfg.input_size
        self._channels = in_channels

    def __call__(self, x):
        """Return (final feature map, last conv activation before pooling)."""
        if x.ndim != 4 or x.shape[1:] != (self._size, self._size, self._channels):
            raise ShapeError(
                f"backbone: expected images of shape (batch, {self._size}, {self._size}, {self._channels}), got {x.shape}"
            )
        act = None
        for blk in self.blocks:
            x, act = blk(x)
        return x, act


@dataclass
class Prediction:
    record_id: str
    scenario: str
    probability: float
    logit: float


def _as_batch(img, dtype):
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr.astype(dtype, copy=False))


def _check_pixels(arr):
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("image pixels must lie in [0, 1]")


class _Base(Module):
    kind = ""

    def logits(self, scenario, cfp=None, faf=None):
        return self.forward(scenario, cfp, faf)[0]

    def forward(self, scenario, cfp=None, faf=None):  # pragma: no cover - abstract
        raise NotImplementedError

    def _inputs(self, scenario, cfp, faf):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        dt = self.parameters()[0].dtype
        if scenario in ("cfp", "fused") and cfp is None:
            raise ValueError(f"scenario {scenario!r} requires a CFP image")
        if scenario in ("faf", "fused") and faf is None:
            raise ValueError(f"scenario {scenario!r} requires an FAF image")
        c = _as_batch(cfp, dt) if scenario != "faf" else None
        f = _as_batch(faf, dt) if scenario != "cfp" else None
        if c is not None and f is not None and c.shape[0] != f.shape[0]:
            raise ValueError(f"fused scenario needs paired batches, got {c.shape[0]} CFP vs {f.shape[0]} FAF")
        return c, f


class M3Model(_Base):
    kind = "m3"

    def __init__(self, cfg=None, feature="rpd", seed=0, no_attention=False, dtype=np.float32):
        cfg = cfg or BackboneConfig()
        if feature not in FEATURES:
            raise ValueError(f"feature must be one of {FEATURES}, got {feature!r}")
        h, w, d = cfg.feature_map
        self.cfp_backbone = Backbone(seed, "cfp_backbone", cfg, cfg.cfp_channels, dtype)
        self.faf_backbone = Backbone(seed, "faf_backbone", cfg, cfg.faf_channels, dtype)
        if not no_attention:
            self.sa_cfp = SelfAttention(seed, "sa_cfp", d, dtype=dtype)
            self.sa_faf = SelfAttention(seed, "sa_faf", d, dtype=dtype)
            self.xattn = CrossModalityAttention(seed, "xattn", d, dtype=dtype)
        self.head_cfp = Head(seed, "head_cfp", d, cfg.head_width, dtype)
        self.head_faf = Head(seed, "head_faf", d, cfg.head_width, dtype)
        self.head_fused = Head(seed, "head_fused", 2 * d if no_attention else d, cfg.head_width, dtype)
        self._cfg = cfg
        self._feature = feature
        self._no_attention = no_attention

    @property
    def config(self):
        return self._cfg

    @property
    def feature_flag(self):
        return self._feature

    def manifest(self):
        return {
            "kind": "m3",
            "scenario": "all",
            "feature": self._feature,
            "no_attention": self._no_attention,
            "no_multitask": False,
            "backbone": self._cfg.to_dict(),
        }

    def encode(self, modality, images):
        """Backbone plus (shared) self-attention for one modality."""
        bb = self.cfp_backbone if modality == "cfp" else self.faf_backbone
        fmap, act = bb(images)
        grid = TokenGrid.from_map(fmap)
        if self._no_attention:
            return grid.tokens, mean(grid.tokens, axis=1), act
        sa = self.sa_cfp if modality == "cfp" else self.sa_faf
        out = self_attention(grid, sa)
        return out, out.pooled, act

    def fuse(self, enc_cfp, enc_faf):
        if self._no_attention:
            return concat([enc_cfp, enc_faf], axis=-1)
        return cross_modality_attention(enc_cfp, enc_faf, self.xattn).fused

    def forward(self, scenario, cfp=None, faf=None):
        """Return (logits (B, 1), {modality: last conv activation})."""
        c, f = self._inputs(scenario, cfp, faf)
        acts = {}
        if scenario == "cfp":
            _, pooled, acts["cfp"] = self.encode("cfp", c)
            return self.head_cfp(pooled), acts
        if scenario == "faf":
            _, pooled, acts["faf"] = self.encode("faf", f)
            return self.head_faf(pooled), acts
        ec, pc, acts["cfp"] = self.encode("cfp", c)
        ef, pf, acts["faf"] = self.encode("faf", f)
        if self._no_attention:
            ec, ef = pc, pf
        return self.head_fused(self.fuse(ec, ef)), acts

    def forward_all(self, cfp, faf):
        """All three logits from one pass over each backbone (stage-I training)."""
        c, f = self._inputs("fused", cfp, faf)
        ec, pc, _ = self.encode("cfp", c)
        ef, pf, _ = self.encode("faf", f)
        fused = self.fuse(pc, pf) if self._no_attention else self.fuse(ec, ef)
        return {"cfp": self.head_cfp(pc), "faf": self.head_faf(pf), "fused": self.head_fused(fused)}

    def path_parameters(self, scenario):
        """Parameters on one scenario's forward path (used for stage-II freeze sets)."""
        if scenario in ("cfp", "faf"):
            mods = [getattr(self, f"{scenario}_backbone")]
            if not self._no_attention:
                mods.append(getattr(self, f"sa_{scenario}"))
            mods.append(getattr(self, f"head_{scenario}"))
            return [p for m in mods for p in m.parameters()]
        mods = [self.head_fused] if self._no_attention else [self.xattn, self.head_fused]
        return [p for m in mods for p in m.parameters()]


class ScenarioModel(_Base):
    """Single-scenario model: the non-M3 baseline, or one arm of a no-multitask ablation."""

    kind = "non_m3"

    def __init__(self, scenario, cfg=None, feature="rpd", seed=0, attention=False, dtype=np.float32):
        cfg = cfg or BackboneConfig()
        if scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
        if feature not in FEATURES:
            raise ValueError(f"feature must be one of {FEATURES}, got {feature!r}")
        _, _, d = cfg.feature_map
        p = f"{scenario}."
        if scenario in ("cfp", "fused"):
            self.cfp_backbone = Backbone(seed, p + "cfp_backbone", cfg, cfg.cfp_channels, dtype)
            if attention:
                self.sa_cfp = SelfAttention(seed, p + "sa_cfp", d, dtype=dtype)
        if scenario in ("faf", "fused"):
            self.faf_backbone = Backbone(seed, p + "faf_backbone", cfg, cfg.faf_channels, dtype)
            if attention:
                self.sa_faf = SelfAttention(seed, p + "sa_faf", d, dtype=dtype)
        if scenario == "fused" and attention:
            self.xattn = CrossModalityAttention(seed, p + "xattn", d, dtype=dtype)
        din = 2 * d if scenario == "fused" and not attention else d
        self.head = Head(seed, p + "head", din, cfg.head_width, dtype)
        self._scenario = scenario
        self._cfg = cfg
        self._feature = feature
        self._attention = attention

    @property
    def scenario(self):
        return self._scenario

    @property
    def config(self):
        return self._cfg

    @property
    def feature_flag(self):
        return self._feature

    def manifest(self):
        return {
            "kind": "non_m3",
            "scenario": self._scenario,
            "feature": self._feature,
            "attention": self._attention,
            "backbone": self._cfg.to_dict(),
        }

    def _encode(self, modality, images):
        fmap, act = getattr(self, f"{modality}_backbone")(images)
        grid = TokenGrid.from_map(fmap)
        if not self._attention:
            return grid.tokens, mean(grid.tokens, axis=1), act
        out = self_attention(grid, getattr(self, f"sa_{modality}"))
        return out, out.pooled, act

    def forward(self, scenario, cfp=None, faf=None):
        if scenario != self._scenario:
            raise ValueError(f"model was built for scenario {self._scenario!r}, not {scenario!r}")
        c, f = self._inputs(scenario, cfp, faf)
        acts = {}
        if scenario == "cfp":
            _, pooled, acts["cfp"] = self._encode("cfp", c)
            return self.head(pooled), acts
        if scenario == "faf":
            _, pooled, acts["faf"] = self._encode("faf", f)
            return self.head(pooled), acts
        ec, pc, acts["cfp"] = self._encode("cfp", c)
        ef, pf, acts["faf"] = self._encode("faf", f)
        if self._attention:
            fused = cross_modality_attention(ec, ef, self.xattn).fused
        else:
            fused = concat([pc, pf], axis=-1)
        return self.head(fused), acts


class SeparateModels(Module):
    """Three independently parameterized scenario models.

    With ``kind="m3"`` this is M3 with multi-task learning disabled; with
    ``kind="non_m3"`` (and no attention) it bundles the three baselines.
    """

    def __init__(self, cfg=None, feature="rpd", seed=0, attention=True, dtype=np.float32, kind="m3"):
        cfg = cfg or BackboneConfig()
        if kind not in ("m3", "non_m3"):
            raise ValueError(f"kind must be 'm3' or 'non_m3', got {kind!r}")
        self.models = [ScenarioModel(s, cfg, feature, seed, attention, dtype) for s in SCENARIOS]
        self.kind = kind
        self._cfg = cfg
        self._feature = feature
        self._attention = attention

    @property
    def config(self):
        return self._cfg

    @property
    def feature_flag(self):
        return self._feature

    def model(self, scenario):
        return self.models[SCENARIOS.index(scenario)]

    def forward(self, scenario, cfp=None, faf=None):
        return self.model(scenario).forward(scenario, cfp, faf)

    def logits(self, scenario, cfp=None, faf=None):
        return self.forward(scenario, cfp, faf)[0]

    def named_parameters(self, prefix=""):
        out = []
        for m in self.models:
            out.extend(m.named_parameters(f"{prefix}{m.scenario}."))
        return out

    def manifest(self):
        if self.kind == "non_m3":
            return {
                "kind": "non_m3",
                "scenario": "all",
                "feature": self._feature,
                "attention": self._attention,
                "backbone": self._cfg.to_dict(),
            }
        return {
            "kind": "m3",
            "scenario": "all",
            "feature": self._feature,
            "no_attention": not self._attention,
            "no_multitask": True,
            "backbone": self._cfg.to_dict(),
        }


def build_m3(cfg=None, feature="rpd", seed=0, no_attention=False, no_multitask=False, dtype=np.float32):
    if no_multitask:
        return SeparateModels(cfg, feature, seed, attention=not no_attention, dtype=dtype)
    return M3Model(cfg, feature, seed, no_attention=no_attention, dtype=dtype)


def build_non_m3(scenario, cfg=None, feature="rpd", seed=0, dtype=np.float32):
    """Baseline for one scenario: same backbone and head as M3, no attention, no sharing."""
    return ScenarioModel(scenario, cfg, feature, seed, attention=False, dtype=dtype)


def build_from_manifest(manifest, seed=0):
    cfg = BackboneConfig(**manifest["backbone"])
    if manifest["kind"] == "m3":
        return build_m3(cfg, manifest["feature"], seed, manifest["no_attention"], manifest["no_multitask"])
    attention = manifest.get("attention", False)
    if manifest["scenario"] == "all":
        return SeparateModels(cfg, manifest["feature"], seed, attention, kind="non_m3")
    return ScenarioModel(manifest["scenario"], cfg, manifest["feature"], seed, attention=attention)


def scenarios_of(model):
    if isinstance(model, ScenarioModel):
        return (model.scenario,)
    return SCENARIOS


def _predict(model, scenario, cfp, faf, record_id):
    for img in (cfp, faf):
        if img is not None:
            _check_pixels(np.asarray(getattr(img, "data", img)))
    with no_grad():
        z = float(model.logits(scenario, cfp, faf).data.reshape(-1)[0])
    prob = float(1.0 / (1.0 + np.exp(-z))) if z >= 0 else float(np.exp(z) / (1.0 + np.exp(z)))
    return Prediction(record_id, scenario, prob, z)


def predict_cfp(model, cfp_image, record_id=""):
    return _predict(model, "cfp", cfp_image, None, record_id)


def predict_faf(model, faf_image, record_id=""):
    return _predict(model, "faf", None, faf_image, record_id)


def predict_fused(model, cfp_image, faf_image, record_id=""):
    if cfp_image is None or faf_image is None:
        raise ValueError("fused prediction requires both the CFP and the FAF image")
    return _predict(model, "fused", cfp_image, faf_image, record_id)


def predict_batch(model, scenario, cfp=None, faf=None, batch_size=64):
    """Probabilities and logits for arrays of images (no grad)."""
    n = len(cfp) if cfp is not None else len(faf)
    zs = []
    with no_grad():
        for i in range(0, n, batch_size):
            c = cfp[i : i + batch_size] if cfp is not None and scenario != "faf" else None
            f = faf[i : i + batch_size] if faf is not None and scenario != "cfp" else None
            zs.append(model.logits(scenario, c, f).data.reshape(-1).astype(np.float64))
    z = np.concatenate(zs) if zs else np.zeros(0)
    return 1.0 / (1.0 + np.exp(-z)), z
