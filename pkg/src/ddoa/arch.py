"""Architecture descriptors for the phase-map CNNs and the dilation design rules.

All filters span a single frequency bin (``filter_h = dilation_h = 1``), so a
spec only describes the microphone axis. The rules enforced by strict
validation are

* ``first-layer-dilation``: the first conv layer must use dilation 1, so it
  sees the phase relation between neighbouring microphones;
* ``dilation-sum``: ``sum(dilation_w * (filter_w - 1)) == M - 1``, so the
  microphone axis is reduced exactly to width 1 after the last conv layer.

Lenient validation only rejects stacks that would shrink the feature map
below width 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_M = 8
DEFAULT_K = 257
DEFAULT_CLASSES = 37
DEFAULT_CHANNELS = 64
DEFAULT_HIDDEN = (512, 512)


class InfeasibleArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    filter_w: int
    dilation_w: int = 1
    out_channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        for name in ("filter_w", "dilation_w", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shrink(self) -> int:
        """Number of microphone columns this layer removes."""
        return self.dilation_w * (self.filter_w - 1)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    conv: tuple[ConvSpec, ...]
    M: int = DEFAULT_M
    K: int = DEFAULT_K
    dense_hidden: tuple[int, ...] = DEFAULT_HIDDEN
    n_classes: int = DEFAULT_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(self.conv))
        object.__setattr__(self, "dense_hidden", tuple(self.dense_hidden))
        if not self.conv:
            raise ValueError("an architecture needs at least one conv layer")
        if self.M < 1 or self.K < 1 or self.n_classes < 1 or any(h < 1 for h in self.dense_hidden):
            raise ValueError("all architecture extents must be >= 1")

    @property
    def filter_widths(self) -> list[int]:
        return [c.filter_w for c in self.conv]

    @property
    def dilations(self) -> list[int]:
        return [c.dilation_w for c in self.conv]


@dataclass
class ValidationReport:
    ok: bool
    violations: list[tuple[str, str]] = field(default_factory=list)
    receptive_field: int = 0
    final_width: int = 0

    @property
    def rules(self) -> list[str]:
        return [rule for rule, _ in self.violations]


def output_width(spec: ArchSpec, layer_index: int) -> int:
    """Microphone-axis width of the feature map after conv layer ``layer_index``."""
    if not 0 <= layer_index < len(spec.conv):
        raise IndexError(f"layer_index {layer_index} out of range for {len(spec.conv)} conv layers")
    width = spec.M
    for i, layer in enumerate(spec.conv[: layer_index + 1]):
        width -= layer.shrink
        if width < 1:
            raise InfeasibleArchitectureError(
                f"{spec.name}: feature width drops to {width} after conv layer {i + 1}"
            )
    return width


def widths(spec: ArchSpec) -> list[int]:
    return [output_width(spec, i) for i in range(len(spec.conv))]


def receptive_field(spec: ArchSpec) -> int:
    """Number of microphones seen by one output feature of the last conv layer."""
    return 1 + sum(layer.shrink for layer in spec.conv)


def validate(spec: ArchSpec, strict: bool = True) -> ValidationReport:
    violations = []
    total_shrink = sum(layer.shrink for layer in spec.conv)
    final = spec.M - total_shrink
    if final < 1:
        violations.append(
            ("width-underflow", f"feature width would reach {final}; total shrink {total_shrink} > M-1={spec.M - 1}")
        )
    if strict:
        if spec.conv[0].dilation_w != 1:
            violations.append(
                ("first-layer-dilation", f"first conv layer has dilation {spec.conv[0].dilation_w}, must be 1")
            )
        if total_shrink != spec.M - 1:
            violations.append(
                ("dilation-sum", f"sum of dilation*(filter_w-1) is {total_shrink}, must equal M-1={spec.M - 1}")
            )
    return ValidationReport(
        ok=not violations,
        violations=violations,
        receptive_field=receptive_field(spec),
        final_width=final,
    )


# --------------------------------------------------------------------------
# builders


def _contiguous(name, n_layers, M, K, channels, hidden, n_classes):
    conv = [ConvSpec(2, 1, channels) for _ in range(n_layers)]
    return ArchSpec(name, tuple(conv), M, K, tuple(hidden), n_classes)


def baseline(
    n_layers: int = DEFAULT_M - 1,
    M: int = DEFAULT_M,
    K: int = DEFAULT_K,
    channels: int = DEFAULT_CHANNELS,
    hidden=DEFAULT_HIDDEN,
    n_classes: int = DEFAULT_CLASSES,
) -> ArchSpec:
    """Contiguous 1x2 filters, ``n_layers`` conv layers (2 to M-1)."""
    if not 2 <= n_layers <= M - 1:
        raise ValueError(f"baseline needs 2..{M - 1} conv layers, got {n_layers}")
    return _contiguous(f"baseline:{n_layers}", n_layers, M, K, channels, hidden, n_classes)


def _named(name, pairs, M, K, channels, hidden, n_classes):
    conv = tuple(ConvSpec(fw, d, channels) for fw, d in pairs)
    return ArchSpec(name, conv, M, K, tuple(hidden), n_classes)


def f2342(M=DEFAULT_M, K=DEFAULT_K, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN, n_classes=DEFAULT_CLASSES):
    """Large-filter variant: contiguous filters of width 2, 3, 4, 2."""
    return _named("f2342", [(2, 1), (3, 1), (4, 1), (2, 1)], M, K, channels, hidden, n_classes)


def d1123(M=DEFAULT_M, K=DEFAULT_K, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN, n_classes=DEFAULT_CLASSES):
    """Gradual expansion: width-2 filters with dilations 1, 1, 2, 3."""
    return _named("d1123", [(2, 1), (2, 1), (2, 2), (2, 3)], M, K, channels, hidden, n_classes)


def d133(M=DEFAULT_M, K=DEFAULT_K, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN, n_classes=DEFAULT_CLASSES):
    """Aggressive expansion: width-2 filters with dilations 1, 3, 3."""
    return _named("d133", [(2, 1), (2, 3), (2, 3)], M, K, channels, hidden, n_classes)


NAMED = {"f2342": f2342, "d1123": d1123, "d133": d133}


def resolve(selection: str, **overrides) -> ArchSpec:
    """Resolve ``baseline:N``, ``f2342``, ``d1123``, ``d133`` or a descriptor file path.

    ``baseline:N`` is built for any N >= 1 so that rule violations can be
    reported by :func:`validate` rather than rejected here.
    """
    sel = selection.strip()
    lower = sel.lower()
    if lower in NAMED:
        return NAMED[lower](**overrides)
    if lower.startswith("baseline"):
        _, _, count = lower.partition(":")
        try:
            n = int(count) if count else DEFAULT_M - 1
        except ValueError:
            raise KeyError(f"bad baseline layer count in {selection!r}") from None
        if n < 1:
            raise KeyError(f"baseline layer count must be >= 1 in {selection!r}")
        M = overrides.get("M", DEFAULT_M)
        return _contiguous(
            f"baseline:{n}",
            n,
            M,
            overrides.get("K", DEFAULT_K),
            overrides.get("channels", DEFAULT_CHANNELS),
            overrides.get("hidden", DEFAULT_HIDDEN),
            overrides.get("n_classes", DEFAULT_CLASSES),
        )
    path = Path(sel)
    if path.is_file():
        return arch_from_text(path.read_text(encoding="utf-8"))
    raise KeyError(f"unknown architecture {selection!r}")


# --------------------------------------------------------------------------
# key=value descriptor

_ARCH_KEYS = ("name", "M", "K", "conv", "dense_hidden", "n_classes")


def arch_to_text(spec: ArchSpec) -> str:
    """Serialize to ``key=value`` lines; conv layers as ``filter_w:dilation_w:out_channels``."""
    conv = ",".join(f"{c.filter_w}:{c.dilation_w}:{c.out_channels}" for c in spec.conv)
    return (
        f"name={spec.name}\n"
        f"M={spec.M}\n"
        f"K={spec.K}\n"
        f"conv={conv}\n"
        f"dense_hidden={','.join(str(h) for h in spec.dense_hidden)}\n"
        f"n_classes={spec.n_classes}\n"
    )


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def arch_from_text(text: str, return_extra: bool = False):
    values = parse_key_values(text)
    missing = [k for k in ("conv",) if k not in values]
    if missing:
        raise ValueError(f"architecture descriptor lacks keys {missing}")
    conv = []
    for item in values["conv"].split(","):
        fields = [int(v) for v in item.split(":")]
        if len(fields) == 2:
            fields.append(DEFAULT_CHANNELS)
        if len(fields) != 3:
            raise ValueError(f"bad conv layer {item!r}; expected filter_w:dilation_w[:out_channels]")
        conv.append(ConvSpec(*fields))
    hidden = values.get("dense_hidden", ",".join(map(str, DEFAULT_HIDDEN)))
    spec = ArchSpec(
        name=values.get("name", "custom"),
        conv=tuple(conv),
        M=int(values.get("M", DEFAULT_M)),
        K=int(values.get("K", DEFAULT_K)),
        dense_hidden=tuple(int(h) for h in hidden.split(",") if h),
        n_classes=int(values.get("n_classes", DEFAULT_CLASSES)),
    )
    if return_extra:
        return spec, {k: v for k, v in values.items() if k not in _ARCH_KEYS}
    return spec
