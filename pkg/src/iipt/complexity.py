"""Closed-form multiply-add and parameter accounting per layer and model.

Counting convention (shared with the kernel's FlopCounter): one madd is one
multiply+add inside a matrix product or affine map; softmax, layernorm and
batchnorm cost 5 flops per input element and are tracked in a separate
column; residual adds, ReLU, gathers, reshapes and the avg-pool mean are
free. Counts describe one forward pass of a single one-person clip.

The per-frame attention score cost is reported as two rows: the part-to-part
map (``token_scores``) and the prepended class-key column
(``cls_key_scores``). Their sum is what the kernel executes; the
part-to-part row alone is the structural quantity whose identity-vs-default
partition ratio is (V/P)^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import FlopCounter
from .model import ModelConfig, forward_coords, init_params


@dataclass
class CostRow:
    name: str
    madds: int = 0
    params: int = 0
    norm_flops: int = 0


@dataclass
class CostReport:
    rows: list[CostRow]

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_norm_flops(self) -> int:
        return sum(r.norm_flops for r in self.rows)

    def group_totals(self) -> dict[str, tuple[int, int, int]]:
        groups: dict[str, list[int]] = {}
        for r in self.rows:
            key = r.name.split(".", 1)[0]
            acc = groups.setdefault(key, [0, 0, 0])
            acc[0] += r.madds
            acc[1] += r.params
            acc[2] += r.norm_flops
        return {k: tuple(v) for k, v in groups.items()}

    def sum_matching(self, suffix: str) -> int:
        return sum(r.madds for r in self.rows if r.name.endswith(suffix))


def _attention_rows(base: str, tokens: int, groups: int, group_size: int,
                    config: ModelConfig) -> list[CostRow]:
    """Rows for one grouped class-token attention block (spatial or temporal):
    ``groups`` independent maps of ``group_size`` queries over group_size+1
    keys, plus the single global class-query map over all tokens."""
    c, h = config.channels, config.heads
    n = groups * group_size
    rows = [
        CostRow(f"{base}.qkv", madds=3 * tokens * c * c, params=3 * (c * c + c)),
        CostRow(f"{base}.cls_scores", madds=tokens * c),
        CostRow(f"{base}.cls_softmax", norm_flops=5 * h * tokens),
        CostRow(f"{base}.cls_mix", madds=tokens * c),
        CostRow(f"{base}.token_scores", madds=groups * group_size * group_size * c),
        CostRow(f"{base}.cls_key_scores", madds=groups * group_size * c),
        CostRow(f"{base}.token_softmax", norm_flops=5 * groups * h * group_size * (group_size + 1)),
        CostRow(f"{base}.token_mix", madds=groups * group_size * (group_size + 1) * c),
        CostRow(f"{base}.out_proj", madds=tokens * c * c, params=c * c + c),
    ]
    if config.attn_mode == "iipa":
        rows.append(CostRow(f"{base}.intra", madds=n * c * c, params=c * c + c))
    return rows


def _flat_attention_rows(base: str, tokens: int, config: ModelConfig) -> list[CostRow]:
    c, h = config.channels, config.heads
    rows = [
        CostRow(f"{base}.qkv", madds=3 * tokens * c * c, params=3 * (c * c + c)),
        CostRow(f"{base}.scores", madds=tokens * tokens * c),
        CostRow(f"{base}.softmax", norm_flops=5 * h * tokens * tokens),
        CostRow(f"{base}.mix", madds=tokens * tokens * c),
        CostRow(f"{base}.out_proj", madds=tokens * c * c, params=c * c + c),
    ]
    if config.attn_mode == "iipa":
        rows.append(CostRow(f"{base}.intra", madds=tokens * c * c, params=c * c + c))
    return rows


def count_model(config: ModelConfig) -> CostReport:
    """Analytic counts matching one instrumented eval forward pass exactly."""
    pmap = config.partition_map()
    p, m, v = pmap.parts, pmap.max_slots, pmap.joint_count
    f = config.frames
    co, c = config.encoder_channels, config.channels
    cm = co * m
    n = p * f
    tokens = n + 1
    positions = f * v

    rows = [
        CostRow("encoder.fj1", madds=positions * 3 * co, params=3 * co + co),
        CostRow("encoder.bn1", norm_flops=5 * positions * co, params=2 * co),
        CostRow("encoder.fj2", madds=positions * co * co, params=co * co + co),
        CostRow("encoder.bn2", norm_flops=5 * positions * co, params=2 * co),
        CostRow("encoder.fp", madds=n * cm * c, params=cm * c + c),
        CostRow("embeddings.cls_token", params=c),
        CostRow("embeddings.pos_spatial", params=p * c),
        CostRow("embeddings.pos_temporal", params=f * c),
    ]
    hidden = config.ffn_ratio * c
    for i in range(config.layers):
        base = f"layers.{i}"
        rows.append(CostRow(f"{base}.norm1", norm_flops=5 * tokens * c, params=2 * c))
        if config.layer_style == "split":
            rows.extend(_attention_rows(f"{base}.s_attn", tokens, groups=f, group_size=p, config=config))
            rows.append(CostRow(f"{base}.norm2", norm_flops=5 * tokens * c, params=2 * c))
            rows.extend(_attention_rows(f"{base}.t_attn", tokens, groups=p, group_size=f, config=config))
        else:
            rows.extend(_flat_attention_rows(f"{base}.attn", tokens, config))
        rows.append(CostRow(f"{base}.norm3", norm_flops=5 * tokens * c, params=2 * c))
        rows.append(CostRow(
            f"{base}.ffn",
            madds=tokens * c * hidden + tokens * hidden * c,
            params=(c * hidden + hidden) + (hidden * c + c),
        ))
    rows.append(CostRow("head", madds=c * config.num_classes, params=c * config.num_classes + config.num_classes))
    return CostReport(rows=rows)


def instrumented_counts(config: ModelConfig, seed: int = 0) -> tuple[int, int]:
    """Execute one eval forward pass with the kernel counter switched on."""
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed)
    coords = rng.standard_normal((3, config.frames, config.partition_map().joint_count, 1))
    with FlopCounter() as counter:
        forward_coords(coords, params, config, mode="eval")
    return counter.madds, counter.norm_flops


def spatial_score_madds(report: CostReport) -> int:
    """Part-to-part spatial score-map madds across all layers."""
    return report.sum_matching(".s_attn.token_scores")


@dataclass
class CostComparison:
    report_a: CostReport
    report_b: CostReport

    @property
    def total_ratio(self) -> float:
        return self.report_a.total_madds / self.report_b.total_madds

    def group_ratios(self) -> dict[str, float]:
        ga, gb = self.report_a.group_totals(), self.report_b.group_totals()
        out = {}
        for key in sorted(set(ga) | set(gb)):
            a = ga.get(key, (0, 0, 0))[0]
            b = gb.get(key, (0, 0, 0))[0]
            out[key] = a / b if b else float("inf")
        return out

    @property
    def spatial_score_ratio(self) -> float | None:
        a, b = spatial_score_madds(self.report_a), spatial_score_madds(self.report_b)
        if a == 0 or b == 0:
            return None
        return a / b


def compare_configs(config_a: ModelConfig, config_b: ModelConfig) -> CostComparison:
    return CostComparison(count_model(config_a), count_model(config_b))


def format_text(report: CostReport) -> str:
    name_w = max(len(r.name) for r in report.rows + [CostRow("total")])
    lines = [f"{'op':<{name_w}}  {'madds':>14}  {'params':>12}  {'norm_flops':>12}"]
    for r in report.rows:
        lines.append(f"{r.name:<{name_w}}  {r.madds:>14}  {r.params:>12}  {r.norm_flops:>12}")
    lines.append(f"{'total':<{name_w}}  {report.total_madds:>14}  {report.total_params:>12}  {report.total_norm_flops:>12}")
    lines.append("")
    lines.append("per-group totals (madds / params / norm_flops):")
    for key, (madds, params, norm) in sorted(report.group_totals().items()):
        lines.append(f"  {key:<12} {madds} / {params} / {norm}")
    return "\n".join(lines)


def format_csv(report: CostReport) -> str:
    lines = ["name,madds,params,norm_flops"]
    for r in report.rows:
        lines.append(f"{r.name},{r.madds},{r.params},{r.norm_flops}")
    lines.append(f"total,{report.total_madds},{report.total_params},{report.total_norm_flops}")
    return "\n".join(lines)


def format_comparison(cmp: CostComparison) -> str:
    lines = [
        f"total madds ratio: {cmp.total_ratio!r}",
    ]
    ratio = cmp.spatial_score_ratio
    if ratio is not None:
        lines.append(f"spatial part-to-part score ratio: {ratio!r}")
    lines.append("per-group madds ratios:")
    for key, value in cmp.group_ratios().items():
        lines.append(f"  {key:<12} {value!r}")
    return "\n".join(lines)
