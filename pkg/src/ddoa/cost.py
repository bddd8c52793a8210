"""FLOP and trainable-parameter accounting for phase-map CNNs.

Conventions, chosen because they reproduce the published per-architecture
totals exactly:

* a conv layer costs ``H_out * W_out * filter_h * filter_w * C_in * C_out``
  multiply-accumulates, where ``H_out x W_out`` is the layer's *output* map;
* a dense layer costs ``n_in * n_out``;
* one multiply-accumulate counts as one FLOP; bias adds and activations are free;
* parameters include biases: ``fh*fw*C_in*C_out + C_out`` and ``n_in*n_out + n_out``.

Reading the conv rule with the *input* map extent instead overestimates every
architecture (baseline:7 would come to 65,809,920 rather than 53,144,960).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import ArchSpec, baseline, output_width


@dataclass(frozen=True)
class LayerCost:
    name: str
    flops: int
    params: int
    out_shape: tuple[int, ...]


@dataclass
class CostReport:
    arch: str
    per_layer: list[LayerCost]
    total_flops: int = 0
    total_params: int = 0
    flops_ratio_vs_reference: float | None = None
    reference: str | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.total_flops = sum(layer.flops for layer in self.per_layer)
        self.total_params = sum(layer.params for layer in self.per_layer)

    def n_conv_layers(self) -> int:
        return sum(1 for layer in self.per_layer if layer.name.startswith("conv"))


# published totals (x1e6) for the four compared architectures
PUBLISHED = {
    "baseline:7": {"flops": 53.14, "params": 8.75, "ratio": 1.0},
    "f2342": {"flops": 35.24, "params": 8.84, "ratio": 0.66},
    "d1123": {"flops": 32.08, "params": 8.73, "ratio": 0.60},
    "d133": {"flops": 19.45, "params": 8.72, "ratio": 0.36},
}


def _layer_costs(spec: ArchSpec) -> list[LayerCost]:
    layers = []
    cin = 1
    for i, conv in enumerate(spec.conv):
        w_out = output_width(spec, i)  # raises on infeasible stacks
        cout = conv.out_channels
        flops = spec.K * w_out * 1 * conv.filter_w * cin * cout
        params = 1 * conv.filter_w * cin * cout + cout
        layers.append(LayerCost(f"conv{i + 1}", flops, params, (spec.K, w_out, cout)))
        cin = cout
    n_in = spec.K * output_width(spec, len(spec.conv) - 1) * cin
    sizes = list(spec.dense_hidden) + [spec.n_classes]
    for j, n_out in enumerate(sizes):
        name = "output" if j == len(sizes) - 1 else f"dense{j + 1}"
        layers.append(LayerCost(name, n_in * n_out, n_in * n_out + n_out, (n_out,)))
        n_in = n_out
    return layers


def cost_report(spec: ArchSpec, reference: ArchSpec | None = None) -> CostReport:
    report = CostReport(spec.name, _layer_costs(spec))
    if reference is not None:
        report.reference = reference.name
        report.flops_ratio_vs_reference = report.total_flops / CostReport(
            reference.name, _layer_costs(reference)
        ).total_flops
    published = PUBLISHED.get(spec.name)
    if published is not None:
        delta = report.total_params / 1e6 - published["params"]
        if abs(delta) >= 0.01:
            report.notes.append(
                f"computed {report.total_params:,} trainable parameters differs from the published "
                f"{published['params']:.2f}e6 by {delta:+.3f}e6"
            )
    return report


def count_flops(spec: ArchSpec, reference: ArchSpec | None = None) -> CostReport:
    """Cost report for ``spec``; ``total_flops`` is the forward-pass FLOP count."""
    return cost_report(spec, reference)


def count_params(spec: ArchSpec, reference: ArchSpec | None = None) -> CostReport:
    """Cost report for ``spec``; ``total_params`` counts weights and biases."""
    return cost_report(spec, reference)


def flops_ratio(spec: ArchSpec, reference: ArchSpec | None = None) -> float:
    reference = reference if reference is not None else baseline(7, M=spec.M, K=spec.K)
    return cost_report(spec).total_flops / cost_report(reference).total_flops


def format_table(report: CostReport) -> str:
    rows = [("layer", "out_shape", "FLOPs", "params")]
    for layer in report.per_layer:
        rows.append((layer.name, "x".join(map(str, layer.out_shape)), f"{layer.flops:,}", f"{layer.params:,}"))
    rows.append(("total", "", f"{report.total_flops:,}", f"{report.total_params:,}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = [f"architecture: {report.arch}"]
    for k, row in enumerate(rows):
        if k == len(rows) - 1:
            lines.append("-" * (sum(widths) + 6))
        lines.append(
            f"{row[0]:<{widths[0]}}  {row[1]:<{widths[1]}}  {row[2]:>{widths[2]}}  {row[3]:>{widths[3]}}"
        )
    lines.append(f"total FLOPs: {report.total_flops:,} ({report.total_flops / 1e6:.2f}e6)")
    lines.append(f"total params: {report.total_params:,} ({report.total_params / 1e6:.2f}e6)")
    if report.flops_ratio_vs_reference is not None:
        lines.append(f"FLOPs ratio vs {report.reference}: {report.flops_ratio_vs_reference:.2f}")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def format_records(report: CostReport) -> str:
    """One ``key=value`` record line per layer plus a totals record."""
    lines = []
    for layer in report.per_layer:
        shape = "x".join(map(str, layer.out_shape))
        lines.append(
            f"record=layer arch={report.arch} layer={layer.name} out_shape={shape} "
            f"flops={layer.flops} params={layer.params}"
        )
    total = (
        f"record=total arch={report.arch} flops={report.total_flops} params={report.total_params}"
    )
    if report.flops_ratio_vs_reference is not None:
        total += f" reference={report.reference} flops_ratio={report.flops_ratio_vs_reference:.6f}"
    lines.append(total)
    return "\n".join(lines)
