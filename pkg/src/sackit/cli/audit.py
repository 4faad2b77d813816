import logging
from typing import Any, Dict, List, Tuple

from ..core.common import write_json
from ..core.selection import (ABLATION_PLANS, STRATEGIES, ArchitectureSpec, ParamBudget, TuningPlan,
                              audit_budget, component_totals, describe_model, make_plan)
from ..core.toy_model import ToySegmenterSpec, build_toy_segmenter
from ..processing.reporting import reference_rows

logger = logging.getLogger(__name__)

HELP = "Count the trainable parameters a tuning plan selects on an architecture"


def configure(parser):
    parser.add_argument("--spec", default="sam_vit_b",
                        help="Architecture spec JSON, a shipped name (sam_vit_b) or 'toy' for the toy segmenter")
    parser.add_argument("--plan", choices=STRATEGIES, default="norm_only", help="Tuning strategy")
    parser.add_argument("-r", "--rank", type=int, help="LoRA rank")
    parser.add_argument("--targets", nargs="+", help="LoRA target tags (attention-qkv, mlp-linear2)")
    parser.add_argument("--last-k", type=int, help="Restrict LoRA to the last k encoder blocks")
    parser.add_argument("--include-prompt-encoder", action="store_true",
                        help="decoder_only: also train the prompt encoder")
    parser.add_argument("--ablation", action="store_true", help="Audit the full strategy catalogue instead of --plan")
    parser.add_argument("--json", help="Write the audit result to this JSON file")


def load_architecture(name: str) -> ArchitectureSpec:
    if name == "toy":
        return describe_model(build_toy_segmenter(ToySegmenterSpec()), "toy-segmenter")
    if name.startswith("toy:"):
        return describe_model(build_toy_segmenter(ToySegmenterSpec.load(name[4:])), "toy-segmenter")
    return ArchitectureSpec.load(name)


def plan_from_args(args) -> TuningPlan:
    options = {"r": args.rank, "targets": args.targets, "last_k": args.last_k,
               "include_prompt_encoder": args.include_prompt_encoder}
    return make_plan(args.plan, {k: v for k, v in options.items() if v})


def _format_count(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def budget_line(label: str, budget: ParamBudget) -> str:
    return (f"{label:<46} {budget.trainable_count:>12,} {_format_count(budget.trainable_count):>8} "
            f"{budget.percent:>9.4f}%")


def run(args) -> int:
    spec = load_architecture(args.spec)
    plans: List[Tuple[str, TuningPlan]] = ABLATION_PLANS if args.ablation else [(args.plan, plan_from_args(args))]

    print(f"Architecture: {spec.name} ({spec.group_total:,} parameters, {len(spec.groups)} groups)")
    print(f"{'plan':<46} {'trainable':>12} {'':>8} {'share':>10}")
    results: List[Dict[str, Any]] = []
    for label, plan in plans:
        budget = audit_budget(spec, plan)
        print(budget_line(label if args.ablation else plan.describe(), budget))
        results.append({
            "label": label,
            "plan": plan.to_dict(),
            "trainable": budget.trainable_count,
            "total": budget.total_count,
            "percent": budget.percent,
            "components": component_totals(spec, budget),
        })

    if not args.ablation:
        for component, count in sorted(results[0]["components"].items()):
            print(f"  {component:<20} {count:>12,}")
        if args.plan == "norm_only":
            print("Normalization share reported for full-size baselines:")
            for row in reference_rows("norm_share"):
                print(f"  {row['label']:<22} {row['norm']:<8} {row['norm_percent']:.3f}%")

    if args.json:
        write_json(args.json, {"architecture": spec.name, "total": spec.group_total, "plans": results})
        logger.info(f"Audit written to: {args.json}")
    return 0
