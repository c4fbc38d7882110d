"""ResFRI and Split-ResFRI blocks.

Four inception-style convolution groups run in order G1 -> G4.  Each group
after the first receives the previous group's output through a *passage*
(1x1 conv -> 3x3 average pool -> BN -> ReLU), fused with its own input slice
by addition or by channel concatenation.  The group outputs are concatenated
and a residual passage of the same structure is added on top.
"""

import enum
from dataclasses import asdict, dataclass

from . import ops
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Module
from .pruning import apply_mask, build_mask
from .tensor import DEFAULT_DTYPE


class FusionMode(str, enum.Enum):
    ADDITION = "addition"
    CONCATENATION = "concatenation"


class GroupKind(enum.Enum):
    G1 = "1x1"
    G2 = "1x1-3x3"
    G3 = "1x1-5x5"
    G4 = "pool-1x1"


GROUP_ORDER = (GroupKind.G1, GroupKind.G2, GroupKind.G3, GroupKind.G4)


@dataclass(frozen=True)
class GroupPlan:
    """Channel widths of the four groups (reduce = the leading 1x1 conv)."""

    g1: int
    g2_reduce: int
    g2: int
    g3_reduce: int
    g3: int
    g4: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"group plan width {name} must be a positive int, got {value!r}")

    @property
    def outputs(self):
        return (self.g1, self.g2, self.g3, self.g4)

    @property
    def out_channels(self):
        return sum(self.outputs)

    @classmethod
    def inception(cls, out_channels):
        """GoogLeNet inception(3a) proportions (64/96/128/16/32/32 of 256) scaled."""
        if out_channels % 8:
            raise ConfigError(f"block output width must be divisible by 8, got {out_channels}")
        g1 = out_channels // 4
        g3 = g4 = out_channels // 8
        g2 = out_channels - g1 - g3 - g4
        return cls(g1=g1, g2_reduce=max(1, 3 * out_channels // 8), g2=g2,
                   g3_reduce=max(1, out_channels // 16), g3=g3, g4=g4)


def default_pruning_ratio(fusion, split):
    if split:
        return 0.0
    return 0.7 if FusionMode(fusion) is FusionMode.ADDITION else 0.0


@dataclass
class ResFRIBlockConfig:
    in_channels: int
    plan: GroupPlan
    fusion: FusionMode = FusionMode.ADDITION
    split: bool = False
    pruning_ratio: float = None
    use_passages: bool = True
    use_residual: bool = True
    use_avgpool: bool = True

    def __post_init__(self):
        if isinstance(self.plan, dict):
            self.plan = GroupPlan(**self.plan)
        try:
            self.fusion = FusionMode(self.fusion)
        except ValueError:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}") from None
        if not isinstance(self.in_channels, int) or self.in_channels < 1:
            raise ConfigError(f"in_channels must be a positive int, got {self.in_channels!r}")
        if self.split and self.in_channels % 8:
            raise ConfigError(
                f"split blocks need channels divisible by 8, got {self.in_channels}"
            )
        if self.pruning_ratio is None:
            self.pruning_ratio = default_pruning_ratio(self.fusion, self.split)
        if not 0.0 <= self.pruning_ratio <= 1.0:
            raise ConfigError(f"pruning_ratio must lie in [0, 1], got {self.pruning_ratio}")

    @property
    def out_channels(self):
        return self.plan.out_channels

    def to_dict(self):
        d = asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown block config keys: {sorted(unknown)}")
        return cls(**d)


def split_widths(channels, split):
    if not split:
        return (channels,) * 4
    if channels % 8:
        raise ConfigError(f"channels must be divisible by 8 for a split block, got {channels}")
    three, one = 3 * channels // 8, channels // 8
    return (three, three, one, one)


def split_input(x, cfg):
    """Return the four group inputs: the whole of ``x`` four times, or its slices."""
    c = x.shape[1]
    if c != cfg.in_channels:
        raise ShapeError(f"block expects {cfg.in_channels} channels, got {c}")
    if not cfg.split:
        return (x, x, x, x)
    widths = split_widths(c, True)
    parts, start = [], 0
    for wdt in widths:
        parts.append(ops.slice_channels(x, start, start + wdt))
        start += wdt
    return tuple(parts)


class PassageCmbr(Module):
    """1x1 conv -> 3x3 avg pool (stride 1, pad 1) -> BN -> ReLU."""

    def __init__(self, in_channels, out_channels, use_pool=True, rng=None, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(in_channels, out_channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.use_pool = use_pool

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        return cmbr_forward(x, self)

    def flops(self, h, w):
        elems = self.out_channels * h * w
        return self.conv.flops(h, w) + (3 if self.use_pool else 2) * elems


def cmbr_forward(delta, passage):
    if delta.shape[1] != passage.in_channels:
        raise ShapeError(
            f"passage expects {passage.in_channels} channels, got {delta.shape[1]}"
        )
    y = passage.conv(delta)
    if passage.use_pool:
        y = ops.avgpool2d(y, 3, 1, 1)
    return ops.relu(passage.bn(y))


def fuse(delta_out, kappa, passage, mode):
    """Merge the previous group's output into the next group's input."""
    mode = FusionMode(mode)
    moved = passage(delta_out)
    try:
        if mode is FusionMode.ADDITION:
            return ops.add(moved, kappa)
        return ops.concat_channels([moved, kappa])
    except ShapeError as exc:
        raise ShapeError(f"{mode.value} fusion: {exc}") from exc


class Group(Module):
    def __init__(self, kind, in_channels, plan, pool="avg", rng=None, dtype=DEFAULT_DTYPE):
        self.kind = kind
        self.pool = pool
        kw = dict(rng=rng, dtype=dtype)
        if kind is GroupKind.G1:
            self.stages = [ConvBNReLU(in_channels, plan.g1, 1, **kw)]
        elif kind is GroupKind.G2:
            self.stages = [ConvBNReLU(in_channels, plan.g2_reduce, 1, **kw),
                           ConvBNReLU(plan.g2_reduce, plan.g2, 3, **kw)]
        elif kind is GroupKind.G3:
            self.stages = [ConvBNReLU(in_channels, plan.g3_reduce, 1, **kw),
                           ConvBNReLU(plan.g3_reduce, plan.g3, 5, **kw)]
        else:
            self.stages = [ConvBNReLU(in_channels, plan.g4, 1, **kw)]

    @property
    def in_channels(self):
        return self.stages[0].in_channels

    @property
    def out_channels(self):
        return self.stages[-1].out_channels

    def forward(self, x):
        if self.kind is GroupKind.G4:
            if self.pool == "avg":
                x = ops.avgpool2d(x, 3, 1, 1)
            else:
                x = ops.maxpool2d(x, 3, 1, 1)
        for stage in self.stages:
            x = stage(x)
        return x

    def flops(self, h, w):
        total = 0
        if self.kind is GroupKind.G4:
            total += self.in_channels * h * w
        for stage in self.stages:
            f, (h, w) = stage.flops(h, w)
            total += f
        return total


class ResFRIBlock(Module):
    def __init__(self, cfg, rng=None, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        kw = dict(rng=rng, dtype=dtype)
        kappa = split_widths(cfg.in_channels, cfg.split)
        outs = cfg.plan.outputs
        concat = cfg.fusion is FusionMode.CONCATENATION

        self.passages = []
        group_in = [kappa[0]]
        for i in range(1, 4):
            if not cfg.use_passages:
                group_in.append(kappa[i])
                continue
            moved = outs[i - 1] if concat else kappa[i]
            passage = PassageCmbr(outs[i - 1], moved, use_pool=cfg.use_avgpool, **kw)
            if cfg.pruning_ratio > 0:
                apply_mask(passage.conv, build_mask(passage.conv.weight, cfg.pruning_ratio))
            self.passages.append(passage)
            group_in.append(moved + kappa[i] if concat else kappa[i])

        pool = "avg" if cfg.use_avgpool else "max"
        self.groups = [Group(kind, group_in[i], cfg.plan, pool=pool, **kw)
                       for i, kind in enumerate(GROUP_ORDER)]
        self.residual = (PassageCmbr(cfg.in_channels, cfg.out_channels,
                                     use_pool=cfg.use_avgpool, **kw)
                         if cfg.use_residual else None)

    @property
    def in_channels(self):
        return self.cfg.in_channels

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def forward_groups(self, x):
        """Outputs of G1..G4 (before filter concatenation)."""
        kappas = split_input(x, self.cfg)
        outputs = []
        for i, group in enumerate(self.groups):
            try:
                if i == 0 or not self.cfg.use_passages:
                    inp = kappas[i]
                else:
                    inp = fuse(outputs[-1], kappas[i], self.passages[i - 1], self.cfg.fusion)
                outputs.append(group(inp))
            except (ShapeError, ConfigError) as exc:
                raise type(exc)(f"group {i + 1}: {exc}") from exc
        return outputs

    def forward(self, x):
        y = ops.concat_channels(self.forward_groups(x))
        if self.residual is not None:
            y = ops.add(y, self.residual(x))
        return y

    def flops(self, h, w):
        total = sum(g.flops(h, w) for g in self.groups)
        total += sum(p.flops(h, w) for p in self.passages)
        if self.residual is not None:
            total += self.residual.flops(h, w)
        return total

    def masked_layers(self):
        return [p.conv for p in self.passages if p.conv.mask is not None]
