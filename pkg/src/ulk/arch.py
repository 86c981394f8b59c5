"""Model family builder: per-stage block counts, widths, kernel schedule,
whole-model forward/merge, parameter accounting, and weight serialization.

Stage 1 uses small-kernel blocks only, stages 2 and 4 large-kernel blocks
only; stage 3 interleaves small-kernel blocks after each large-kernel block
when the depth is scaled up. Channel widths double at each stage: C, 2C,
4C, 8C. Models are built with random weights (deterministic per seed); they
exist to carry the equivalence transforms and benchmarks, not training.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import (
    BlockSpec,
    DownsampleSpec,
    FfnParams,
    GrnParams,
    SeParams,
    block_forward,
    downsample_forward,
    merge_block_for_inference,
    merge_downsample_for_inference,
)
from .convops import ConvKernel
from .errors import ConfigError, FormatError, ShapeError
from .reparam import (
    BatchNormParams,
    DilatedReparamBlock,
    DilatedReparamConfig,
    DrbBranch,
)
from .tensor import Tensor, reduce_spatial_mean
from .weightio import read_tensor_file, write_tensor_file

META_NAME = "meta/arch"
_META_VERSION = 1


@dataclass(frozen=True)
class VariantDef:
    depths: tuple[int, int, int, int]
    width: int
    stage3_lark: int
    params_ref_m: float  # published reference count, millions


# name -> (N1..N4, C, LarK blocks in stage 3, reference params)
VARIANTS: "OrderedDict[str, VariantDef]" = OrderedDict(
    [
        ("A", VariantDef((2, 2, 6, 2), 40, 6, 4.4)),
        ("F", VariantDef((2, 2, 6, 2), 48, 6, 6.2)),
        ("P", VariantDef((2, 2, 6, 2), 64, 6, 10.7)),
        ("N", VariantDef((2, 2, 8, 2), 80, 8, 18.3)),
        ("T", VariantDef((3, 3, 18, 3), 80, 9, 31.0)),
        ("S", VariantDef((3, 3, 27, 3), 96, 9, 55.6)),
        ("B", VariantDef((3, 3, 27, 3), 128, 9, 97.9)),
        ("L", VariantDef((3, 3, 27, 3), 192, 9, 218.3)),
        ("XL", VariantDef((3, 3, 27, 3), 256, 9, 386.4)),
        ("H", VariantDef((3, 3, 27, 3), 480, 9, 1400.0)),
    ]
)


@dataclass(frozen=True)
class ArchSpec:
    """Resolved hyper-parameters of one model instance."""

    depths: tuple[int, int, int, int]
    width: int
    stage3_lark: int
    lark_kernel: int = 13
    ffn_ratio: int = 4
    in_channels: int = 3
    with_head: bool = False
    num_classes: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(n) for n in self.depths))
        if len(self.depths) != 4 or any(n < 1 for n in self.depths):
            raise ConfigError(f"need four positive stage depths, got {self.depths}")
        if self.stage3_lark > self.depths[2] or self.stage3_lark < 0:
            raise ConfigError(
                f"stage-3 LarK count {self.stage3_lark} exceeds depth {self.depths[2]}"
            )
        if self.width % 4:
            raise ConfigError(f"width must be divisible by 4, got {self.width}")
        if self.lark_kernel % 2 == 0 or self.lark_kernel < 3:
            raise ConfigError(f"large kernel must be odd >= 3, got {self.lark_kernel}")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be >= 1")

    def stage_width(self, stage: int) -> int:
        return self.width * (1 << stage)

    def stage_kinds(self, stage: int) -> list[str]:
        """Block kind sequence: SmaK-only stage 1, LarK-only stages 2/4,
        LarK followed by its share of SmaKs in stage 3."""
        n = self.depths[stage]
        if stage == 0:
            return ["smak"] * n
        if stage in (1, 3):
            return ["lark"] * n
        n_lark = self.stage3_lark
        n_smak = n - n_lark
        if n_lark == 0:
            return ["smak"] * n
        ratio, rem = divmod(n_smak, n_lark)
        kinds: list[str] = []
        for _ in range(n_lark):
            kinds += ["lark"] + ["smak"] * ratio
        kinds += ["smak"] * rem
        return kinds


@dataclass(frozen=True)
class HeadParams:
    norm: BatchNormParams
    fc_weight: Tensor  # [num_classes, 8C]
    fc_bias: Tensor


@dataclass(frozen=True)
class Model:
    spec: ArchSpec
    stem: DownsampleSpec
    downs: tuple[DownsampleSpec, DownsampleSpec, DownsampleSpec]
    stages: tuple[tuple[BlockSpec, ...], ...]
    head: HeadParams | None = None

    @property
    def merged(self) -> bool:
        return all(b.merged for stage in self.stages for b in stage)

    @property
    def dtype(self):
        return self.stem.convs[0].weight.dtype

    @property
    def out_channels(self) -> int:
        return self.spec.stage_width(3)


# ---------------------------------------------------------------------------
# construction


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    z = rng.standard_normal(shape)
    for _ in range(4):
        mask = np.abs(z) > 2.0
        if not mask.any():
            break
        z[mask] = rng.standard_normal(int(mask.sum()))
    return np.clip(z, -2.0, 2.0) * std


def _rand_bn(rng, c: int, dtype) -> BatchNormParams:
    # Non-trivial statistics so every merge fuses a real affine map.
    return BatchNormParams(
        gamma=Tensor(1.0 + 0.1 * rng.standard_normal(c), dtype=dtype),
        beta=Tensor(0.1 * rng.standard_normal(c), dtype=dtype),
        running_mean=Tensor(0.1 * rng.standard_normal(c), dtype=dtype),
        running_var=Tensor(rng.uniform(0.5, 2.0, c), dtype=dtype),
    )


def _dw_kernel(rng, c: int, k: int, dtype) -> ConvKernel:
    return ConvKernel(weight=Tensor(_trunc_normal(rng, (c, 1, k, k)), dtype=dtype))


def _dense_kernel(rng, c_in: int, c_out: int, k: int, dtype, bias: bool) -> ConvKernel:
    return ConvKernel(
        weight=Tensor(_trunc_normal(rng, (c_out, c_in, k, k)), dtype=dtype),
        bias=Tensor(np.zeros(c_out), dtype=dtype) if bias else None,
    )


def _make_drb(rng, c: int, config: DilatedReparamConfig, dtype) -> DilatedReparamBlock:
    return DilatedReparamBlock(
        main=_dw_kernel(rng, c, config.K, dtype),
        main_bn=_rand_bn(rng, c, dtype),
        branches=tuple(
            DrbBranch(kernel=_dw_kernel(rng, c, k, dtype), dilation=r, bn=_rand_bn(rng, c, dtype))
            for k, r in config.branches
        ),
    )


def _make_block(rng, kind: str, c: int, spec: ArchSpec, dtype) -> BlockSpec:
    if kind == "lark":
        conv = _make_drb(rng, c, DilatedReparamConfig.for_kernel(spec.lark_kernel), dtype)
    else:
        conv = _dw_kernel(rng, c, 3, dtype)
    hidden = spec.ffn_ratio * c
    return BlockSpec(
        kind=kind,
        channels=c,
        conv=conv,
        norm=_rand_bn(rng, c, dtype),
        se=SeParams(
            fc1_weight=Tensor(_trunc_normal(rng, (c // 4, c)), dtype=dtype),
            fc1_bias=Tensor(np.zeros(c // 4), dtype=dtype),
            fc2_weight=Tensor(_trunc_normal(rng, (c, c // 4)), dtype=dtype),
            fc2_bias=Tensor(np.zeros(c), dtype=dtype),
        ),
        ffn=FfnParams(
            pw1=_dense_kernel(rng, c, hidden, 1, dtype, bias=True),
            grn=GrnParams(
                gamma=Tensor(np.zeros(hidden), dtype=dtype),
                beta=Tensor(np.zeros(hidden), dtype=dtype),
            ),
            pw2=_dense_kernel(rng, hidden, c, 1, dtype, bias=True),
        ),
        ffn_norm=_rand_bn(rng, c, dtype),
    )


def build_model(spec: ArchSpec, seed: int, dtype=np.float64) -> Model:
    """Instantiate a model with deterministic random weights."""
    rng = np.random.default_rng(seed)
    C = spec.width
    stem = DownsampleSpec(
        kind="stem",
        convs=(
            _dense_kernel(rng, spec.in_channels, C // 2, 3, dtype, bias=False),
            _dense_kernel(rng, C // 2, C, 3, dtype, bias=False),
        ),
        norms=(_rand_bn(rng, C // 2, dtype), _rand_bn(rng, C, dtype)),
    )
    stages = []
    downs = []
    for si in range(4):
        c = spec.stage_width(si)
        if si > 0:
            downs.append(
                DownsampleSpec(
                    kind="inter",
                    convs=(_dense_kernel(rng, c // 2, c, 3, dtype, bias=False),),
                    norms=(_rand_bn(rng, c, dtype),),
                )
            )
        stages.append(tuple(_make_block(rng, kind, c, spec, dtype) for kind in spec.stage_kinds(si)))
    head = None
    if spec.with_head:
        c8 = spec.stage_width(3)
        head = HeadParams(
            norm=_rand_bn(rng, c8, dtype),
            fc_weight=Tensor(_trunc_normal(rng, (spec.num_classes, c8)), dtype=dtype),
            fc_bias=Tensor(np.zeros(spec.num_classes), dtype=dtype),
        )
    return Model(spec=spec, stem=stem, downs=tuple(downs), stages=tuple(stages), head=head)


def build_variant(
    name: str,
    seed: int = 0,
    width: int | None = None,
    in_channels: int = 3,
    with_head: bool = False,
    num_classes: int = 1000,
    dtype=np.float64,
) -> Model:
    """Build a named variant; `width` overrides the published stage-1 width."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
    v = VARIANTS[name]
    spec = ArchSpec(
        depths=v.depths,
        width=width if width is not None else v.width,
        stage3_lark=v.stage3_lark,
        in_channels=in_channels,
        with_head=with_head,
        num_classes=num_classes,
    )
    return build_model(spec, seed, dtype=dtype)


# ---------------------------------------------------------------------------
# forward


def model_forward(m: Model, x: Tensor) -> Tensor:
    """Features after stage 4: [B, 8C, H/32, W/32]."""
    if x.data.ndim != 4 or x.dims[1] != m.spec.in_channels:
        raise ShapeError(f"expected [B, {m.spec.in_channels}, H, W] input, got {x.dims}")
    if x.dims[2] % 32 or x.dims[3] % 32:
        raise ShapeError(f"input resolution {x.dims[2]}x{x.dims[3]} not divisible by 32")
    y = downsample_forward(x, m.stem)
    for si in range(4):
        if si > 0:
            y = downsample_forward(y, m.downs[si - 1])
        for block in m.stages[si]:
            y = block_forward(y, block)
    return y


def head_forward(m: Model, features: Tensor) -> Tensor:
    """Classifier logits from stage-4 features (global pool -> BN -> linear)."""
    if m.head is None:
        raise ConfigError("model was built without a classifier head")
    pooled = reduce_spatial_mean(features).data
    bn = m.head.norm
    scale = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
    pooled = (pooled - bn.running_mean.data) * scale + bn.beta.data
    return Tensor._wrap(pooled @ m.head.fc_weight.data.T + m.head.fc_bias.data)


def merge_model(m: Model) -> Model:
    """Collapse every block and fold every conv-adjacent BN; forward-exact."""
    return replace(
        m,
        stem=merge_downsample_for_inference(m.stem),
        downs=tuple(merge_downsample_for_inference(d) for d in m.downs),
        stages=tuple(tuple(merge_block_for_inference(b) for b in stage) for stage in m.stages),
    )


# ---------------------------------------------------------------------------
# parameter accounting

_STATS_SUFFIXES = (".mean", ".var")


def _walk_downsample(prefix: str, ds: DownsampleSpec):
    for i, (conv, bn) in enumerate(zip(ds.convs, ds.norms)):
        tag = f"{prefix}.{i}" if ds.kind == "stem" else prefix
        yield f"{tag}.weight", conv.weight
        if conv.bias is not None:
            yield f"{tag}.bias", conv.bias
        if bn is not None:
            yield from _walk_bn(f"{tag}.bn", bn)


def _walk_bn(prefix: str, bn: BatchNormParams):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta
    yield f"{prefix}.mean", bn.running_mean
    yield f"{prefix}.var", bn.running_var


def _walk_conv(prefix: str, conv: ConvKernel):
    yield f"{prefix}.weight", conv.weight
    if conv.bias is not None:
        yield f"{prefix}.bias", conv.bias


def _walk_block(prefix: str, b: BlockSpec):
    if isinstance(b.conv, DilatedReparamBlock):
        yield from _walk_conv(f"{prefix}.drb.main", b.conv.main)
        yield from _walk_bn(f"{prefix}.drb.main.bn", b.conv.main_bn)
        for j, br in enumerate(b.conv.branches):
            yield from _walk_conv(f"{prefix}.drb.br{j}", br.kernel)
            yield from _walk_bn(f"{prefix}.drb.br{j}.bn", br.bn)
    else:
        yield from _walk_conv(f"{prefix}.conv", b.conv)
    if b.norm is not None:
        yield from _walk_bn(f"{prefix}.norm", b.norm)
    yield f"{prefix}.se.fc1.weight", b.se.fc1_weight
    yield f"{prefix}.se.fc1.bias", b.se.fc1_bias
    yield f"{prefix}.se.fc2.weight", b.se.fc2_weight
    yield f"{prefix}.se.fc2.bias", b.se.fc2_bias
    yield from _walk_conv(f"{prefix}.ffn.pw1", b.ffn.pw1)
    yield f"{prefix}.ffn.grn.gamma", b.ffn.grn.gamma
    yield f"{prefix}.ffn.grn.beta", b.ffn.grn.beta
    yield from _walk_conv(f"{prefix}.ffn.pw2", b.ffn.pw2)
    if b.ffn_norm is not None:
        yield from _walk_bn(f"{prefix}.ffn_norm", b.ffn_norm)


def named_tensors(m: Model):
    """Canonical (name, tensor) walk used by serialization and counting."""
    yield from _walk_downsample("stem", m.stem)
    for si in range(4):
        if si > 0:
            yield from _walk_downsample(f"down{si}", m.downs[si - 1])
        for bi, b in enumerate(m.stages[si]):
            yield from _walk_block(f"s{si}.b{bi}", b)
    if m.head is not None:
        yield from _walk_bn("head.norm", m.head.norm)
        yield "head.fc.weight", m.head.fc_weight
        yield "head.fc.bias", m.head.fc_bias


def _is_learnable(name: str) -> bool:
    return not name.endswith(_STATS_SUFFIXES)


def count_params(m: Model, with_head: bool = False) -> int:
    """Learned scalars (conv/FC weights and biases, BN/GRN affine terms)."""
    total = 0
    for name, t in named_tensors(m):
        if name.startswith("head.") and not with_head:
            continue
        if _is_learnable(name):
            total += t.size
    return total


def param_breakdown(m: Model) -> "OrderedDict[str, int]":
    """Learned scalars grouped by top-level module."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, t in named_tensors(m):
        if not _is_learnable(name):
            continue
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + t.size
    return out


def count_params_spec(spec: ArchSpec, with_head: bool = False, merged: bool = False) -> int:
    """Analytic learned-scalar count; lets the huge variants be audited
    without materializing their weights."""
    def bn(c):
        return 0 if merged else 2 * c

    def block(kind, c):
        if kind == "lark":
            if merged:
                conv = spec.lark_kernel ** 2 * c + c
            else:
                cfg = DilatedReparamConfig.for_kernel(spec.lark_kernel)
                conv = spec.lark_kernel ** 2 * c + 2 * c
                conv += sum(k * k * c + 2 * c for k, _ in cfg.branches)
        else:
            conv = 9 * c + (c if merged else 0)
        se = (c // 4) * c + c // 4 + c * (c // 4) + c
        e = spec.ffn_ratio
        ffn = e * c * c + e * c + 2 * e * c + e * c * c + c
        return conv + bn(c) + se + ffn + bn(c)

    C = spec.width
    total = 3 * (C // 2) * 9 + bn(C // 2) + (C // 2) * C * 9 + bn(C)
    if merged:
        total += C // 2 + C  # fused stem biases
    for si in range(4):
        c = spec.stage_width(si)
        if si > 0:
            total += (c // 2) * c * 9 + bn(c) + (c if merged else 0)
        total += sum(block(kind, c) for kind in spec.stage_kinds(si))
    if with_head:
        c8 = spec.stage_width(3)
        total += 2 * c8 + spec.num_classes * c8 + spec.num_classes
    return total


# ---------------------------------------------------------------------------
# serialization


def _encode_meta(m: Model) -> np.ndarray:
    s = m.spec
    fields = [
        _META_VERSION, s.width, *s.depths, s.stage3_lark, s.lark_kernel,
        s.ffn_ratio, s.in_channels, int(s.with_head), s.num_classes,
        int(m.merged), 0 if m.dtype == np.float32 else 1,
    ]
    return np.asarray(fields, dtype=np.float64)


def _decode_meta(arr: np.ndarray) -> tuple[ArchSpec, bool, np.dtype]:
    vals = [int(v) for v in np.asarray(arr).ravel()]
    if len(vals) != 14 or vals[0] != _META_VERSION:
        raise FormatError(f"unsupported model metadata: {vals[:1]}")
    spec = ArchSpec(
        depths=tuple(vals[2:6]),
        width=vals[1],
        stage3_lark=vals[6],
        lark_kernel=vals[7],
        ffn_ratio=vals[8],
        in_channels=vals[9],
        with_head=bool(vals[10]),
        num_classes=vals[11],
    )
    return spec, bool(vals[12]), np.dtype(np.float32 if vals[13] == 0 else np.float64)


def save_weights(m: Model, path) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    tensors[META_NAME] = _encode_meta(m)
    for name, t in named_tensors(m):
        tensors[name] = t.data
    write_tensor_file(path, tensors)


def _bn_from(tensors, prefix: str, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(tensors[f"{prefix}.gamma"], dtype=dtype),
        beta=Tensor(tensors[f"{prefix}.beta"], dtype=dtype),
        running_mean=Tensor(tensors[f"{prefix}.mean"], dtype=dtype),
        running_var=Tensor(tensors[f"{prefix}.var"], dtype=dtype),
    )


def _conv_from(tensors, prefix: str, dtype) -> ConvKernel:
    bias = tensors.get(f"{prefix}.bias")
    return ConvKernel(
        weight=Tensor(tensors[f"{prefix}.weight"], dtype=dtype),
        bias=Tensor(bias, dtype=dtype) if bias is not None else None,
    )


def _assemble_model(spec: ArchSpec, tensors, merged: bool, dtype) -> Model:
    def ds(prefix: str, kind: str, n: int) -> DownsampleSpec:
        tags = [f"{prefix}.{i}" for i in range(n)] if kind == "stem" else [prefix]
        convs = tuple(_conv_from(tensors, t, dtype) for t in tags)
        norms = tuple(
            None if merged else _bn_from(tensors, f"{t}.bn", dtype) for t in tags
        )
        return DownsampleSpec(kind=kind, convs=convs, norms=norms)

    def block(prefix: str, kind: str, c: int) -> BlockSpec:
        if kind == "lark" and not merged:
            cfg = DilatedReparamConfig.for_kernel(spec.lark_kernel)
            conv = DilatedReparamBlock(
                main=_conv_from(tensors, f"{prefix}.drb.main", dtype),
                main_bn=_bn_from(tensors, f"{prefix}.drb.main.bn", dtype),
                branches=tuple(
                    DrbBranch(
                        kernel=_conv_from(tensors, f"{prefix}.drb.br{j}", dtype),
                        dilation=r,
                        bn=_bn_from(tensors, f"{prefix}.drb.br{j}.bn", dtype),
                    )
                    for j, (_, r) in enumerate(cfg.branches)
                ),
            )
        else:
            conv = _conv_from(tensors, f"{prefix}.conv", dtype)
        hidden = spec.ffn_ratio * c
        return BlockSpec(
            kind=kind,
            channels=c,
            conv=conv,
            norm=None if merged else _bn_from(tensors, f"{prefix}.norm", dtype),
            se=SeParams(
                fc1_weight=Tensor(tensors[f"{prefix}.se.fc1.weight"], dtype=dtype),
                fc1_bias=Tensor(tensors[f"{prefix}.se.fc1.bias"], dtype=dtype),
                fc2_weight=Tensor(tensors[f"{prefix}.se.fc2.weight"], dtype=dtype),
                fc2_bias=Tensor(tensors[f"{prefix}.se.fc2.bias"], dtype=dtype),
            ),
            ffn=FfnParams(
                pw1=_conv_from(tensors, f"{prefix}.ffn.pw1", dtype),
                grn=GrnParams(
                    gamma=Tensor(tensors[f"{prefix}.ffn.grn.gamma"], dtype=dtype),
                    beta=Tensor(tensors[f"{prefix}.ffn.grn.beta"], dtype=dtype),
                ),
                pw2=_conv_from(tensors, f"{prefix}.ffn.pw2", dtype),
            ),
            ffn_norm=None if merged else _bn_from(tensors, f"{prefix}.ffn_norm", dtype),
        )

    stem = ds("stem", "stem", 2)
    downs = tuple(ds(f"down{si}", "inter", 1) for si in (1, 2, 3))
    stages = tuple(
        tuple(
            block(f"s{si}.b{bi}", kind, spec.stage_width(si))
            for bi, kind in enumerate(spec.stage_kinds(si))
        )
        for si in range(4)
    )
    head = None
    if spec.with_head:
        head = HeadParams(
            norm=_bn_from(tensors, "head.norm", dtype),
            fc_weight=Tensor(tensors["head.fc.weight"], dtype=dtype),
            fc_bias=Tensor(tensors["head.fc.bias"], dtype=dtype),
        )
    return Model(spec=spec, stem=stem, downs=downs, stages=stages, head=head)


def load_weights(path) -> Model:
    tensors = read_tensor_file(path)
    if META_NAME not in tensors:
        raise FormatError(f"missing {META_NAME} entry")
    spec, merged, dtype = _decode_meta(tensors[META_NAME])
    try:
        model = _assemble_model(spec, tensors, merged, dtype)
    except KeyError as exc:
        raise FormatError(f"weight file is missing tensor {exc.args[0]!r}") from exc

    expected = {name: t for name, t in named_tensors(model)}
    stored = {k: v for k, v in tensors.items() if k != META_NAME}
    if set(stored) != set(expected):
        extra = sorted(set(stored) - set(expected))[:3]
        missing = sorted(set(expected) - set(stored))[:3]
        raise FormatError(f"tensor set mismatch: extra={extra}, missing={missing}")
    for name, t in expected.items():
        if tuple(stored[name].shape) != t.dims:
            raise ShapeError(
                f"tensor {name!r} has shape {stored[name].shape}, expected {t.dims}"
            )
    return model
