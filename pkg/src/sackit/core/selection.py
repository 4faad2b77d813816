"""
Tuning plans: which parameter groups train, where LoRA adapters go, and what
that costs in parameters.

Works identically on a declarative ArchitectureSpec (JSON) and on a live
torch model, which is first described as an ArchitectureSpec by walking its
modules and their `sac_tags`.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .common import (AuditError, ConfigurationError, SelectionError, data_file,
                     load_json)
from .primitives import AffineNorm, LoRAAdapter, inject_lora, lora_param_count

logger = logging.getLogger(__name__)

STRATEGIES = ("norm_only", "decoder_only", "lora", "full", "composite_cracksam", "none")
LORA_STRATEGIES = ("lora", "composite_cracksam")
LORA_TARGET_TAGS = ("attention-qkv", "mlp-linear2")
NORM_TAGS = ("norm-layer", "norm-batch", "norm-group")
COMPOSITE_DEFAULT_RANK = 8

_BLOCK_TAG = re.compile(r"^block:(\d+)$")
_TORCH_NORMS = {
    nn.LayerNorm: "norm-layer",
    nn.GroupNorm: "norm-group",
    nn.modules.batchnorm._BatchNorm: "norm-batch",
}


# --- Types ---

@dataclass(frozen=True)
class ParamGroup:
    name: str
    shape: Tuple[int, ...]
    tags: FrozenSet[str] = frozenset()
    members: Tuple[str, ...] = ()  # model parameter names backing this group

    def __post_init__(self):
        if any(int(d) < 0 for d in self.shape):
            raise ConfigurationError(f"Group '{self.name}' has a negative dimension: {self.shape}")
        norm_tags = [t for t in self.tags if t in NORM_TAGS]
        if len(norm_tags) > 1:
            raise ConfigurationError(f"Group '{self.name}' carries several norm tags: {sorted(norm_tags)}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def block(self) -> Optional[int]:
        for t in self.tags:
            m = _BLOCK_TAG.match(t)
            if m:
                return int(m.group(1))
        return None

    @property
    def is_norm(self) -> bool:
        return any(t in NORM_TAGS for t in self.tags)


@dataclass
class ArchitectureSpec:
    name: str
    groups: List[ParamGroup]
    total_params: Optional[int] = None

    def __post_init__(self):
        names = [g.name for g in self.groups]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigurationError(f"Duplicate group names in '{self.name}': {duplicates}")
        if self.total_params is not None:
            actual = self.group_total
            if abs(actual - self.total_params) > 0.01 * max(self.total_params, 1):
                raise ConfigurationError(
                    f"Spec '{self.name}' declares {self.total_params:,} parameters but its groups sum to {actual:,}"
                )
        self._by_name = {g.name: g for g in self.groups}

    @property
    def group_total(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def all_tags(self) -> FrozenSet[str]:
        return frozenset(t for g in self.groups for t in g.tags)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def group(self, name: str) -> ParamGroup:
        return self._by_name[name]

    def tagged(self, tag: str) -> List[ParamGroup]:
        return [g for g in self.groups if tag in g.tags]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchitectureSpec":
        try:
            groups = [
                ParamGroup(g["name"], tuple(int(d) for d in g["shape"]), frozenset(g.get("tags", ())), (g["name"],))
                for g in data["groups"]
            ]
            return cls(data["name"], groups, data.get("total_params"))
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"Malformed architecture spec: missing or invalid field {e}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "total_params": self.total_params,
            "groups": [{"name": g.name, "shape": list(g.shape), "tags": sorted(g.tags)} for g in self.groups],
        }

    @classmethod
    def load(cls, path: str) -> "ArchitectureSpec":
        """Load a spec file; bare names resolve to the specs shipped with the package."""
        if not os.path.exists(path) and os.path.exists(data_file(f"{path}.json")):
            path = data_file(f"{path}.json")
        return cls.from_dict(load_json(path))


@dataclass(frozen=True)
class TuningPlan:
    strategy: str
    lora_rank: Optional[int] = None
    lora_targets: Tuple[str, ...] = ()
    last_k_blocks: Optional[int] = None  # None = every block
    include_prompt_encoder: bool = False

    @property
    def uses_lora(self) -> bool:
        return self.strategy in LORA_STRATEGIES

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "lora_rank": self.lora_rank,
            "lora_targets": list(self.lora_targets),
            "last_k_blocks": self.last_k_blocks,
            "include_prompt_encoder": self.include_prompt_encoder,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TuningPlan":
        data = dict(data)
        strategy = data.pop("strategy", None)
        if strategy is None:
            raise ConfigurationError("Tuning plan needs a 'strategy'")
        return make_plan(strategy, data)

    def describe(self) -> str:
        if not self.uses_lora:
            return self.strategy
        blocks = "all blocks" if self.last_k_blocks is None else f"last {self.last_k_blocks} blocks"
        return f"{self.strategy}(r={self.lora_rank}, {'+'.join(self.lora_targets)}, {blocks})"


@dataclass(frozen=True)
class AdapterSite:
    """A LoRA adapter attached to a 2-D weight group of shape (d_out, d_in)."""
    group: str
    d_in: int
    d_out: int
    rank: int
    block: Optional[int] = None

    @property
    def num_params(self) -> int:
        return lora_param_count(self.d_in, self.d_out, self.rank, 1)


@dataclass(frozen=True)
class Selection:
    groups: Tuple[str, ...] = ()
    adapters: Tuple[AdapterSite, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.groups and not self.adapters


@dataclass
class ParamBudget:
    trainable_count: int
    total_count: int
    breakdown: Dict[str, int] = field(default_factory=dict)
    adapter_count: int = 0

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable_count / self.total_count if self.total_count else 0.0


# --- Plans ---

def _pick(options: Dict[str, Any], *keys, default=None):
    for k in keys:
        if k in options and options[k] is not None:
            return options[k]
    return default


def make_plan(strategy: str, options: Optional[Dict[str, Any]] = None) -> TuningPlan:
    """Validate a strategy name plus its options into a TuningPlan."""
    options = dict(options or {})
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"Unknown tuning strategy '{strategy}', expected one of {STRATEGIES}")

    rank = _pick(options, "lora_rank", "r", "rank")
    targets = _pick(options, "lora_targets", "targets")
    last_k = _pick(options, "last_k_blocks", "last_k")
    include_prompt = bool(options.get("include_prompt_encoder", False))

    if strategy not in LORA_STRATEGIES:
        if rank is not None or targets or last_k is not None:
            raise ConfigurationError(f"Strategy '{strategy}' takes no LoRA options")
        return TuningPlan(strategy, include_prompt_encoder=include_prompt and strategy == "decoder_only")

    if strategy == "composite_cracksam":
        rank = COMPOSITE_DEFAULT_RANK if rank is None else rank
        targets = targets or ("attention-qkv",)
    if rank is None:
        raise ConfigurationError("LoRA plans need a rank ('r' / 'lora_rank')")
    if not isinstance(rank, int) or rank < 1:
        raise ConfigurationError(f"LoRA rank must be a positive integer, got {rank!r}")
    if isinstance(targets, str):
        targets = (targets,)
    targets = tuple(targets or ("attention-qkv",))
    unknown = [t for t in targets if t not in LORA_TARGET_TAGS]
    if unknown:
        raise ConfigurationError(f"Unsupported LoRA targets {unknown}; expected {LORA_TARGET_TAGS}")
    if last_k is not None and (not isinstance(last_k, int) or last_k < 1):
        raise ConfigurationError(f"last_k_blocks must be a positive integer, got {last_k!r}")
    return TuningPlan(strategy, rank, targets, last_k, include_prompt_encoder=False)


# Budget rows of the SAM fine-tuning ablation, in table order.
ABLATION_PLANS = [
    ("Finetune Decoder", make_plan("decoder_only")),
    ("LoRA - 2nd Linear of MLP, last block, r=8", make_plan("lora", {"r": 8, "targets": "mlp-linear2", "last_k": 1})),
    ("LoRA - 2nd Linear of MLP, last block, r=16", make_plan("lora", {"r": 16, "targets": "mlp-linear2", "last_k": 1})),
    ("LoRA - Attn. QKV, last 2 blocks, r=8", make_plan("lora", {"r": 8, "targets": "attention-qkv", "last_k": 2})),
    ("LoRA - Attn. QKV, last 2 blocks, r=16", make_plan("lora", {"r": 16, "targets": "attention-qkv", "last_k": 2})),
    ("LoRA - Attn. QKV, last 4 blocks, r=8", make_plan("lora", {"r": 8, "targets": "attention-qkv", "last_k": 4})),
    ("LoRA - Attn. QKV, last 4 blocks, r=16", make_plan("lora", {"r": 16, "targets": "attention-qkv", "last_k": 4})),
    ("LoRA encoder + decoder + prompt encoder", make_plan("composite_cracksam", {"r": 8})),
    ("Tune Layer Norms", make_plan("norm_only")),
]


# --- Describing models ---

def _norm_tag(module: nn.Module) -> Optional[str]:
    if isinstance(module, AffineNorm):
        return f"norm-{module.kind}"
    for cls, tag_name in _TORCH_NORMS.items():
        if isinstance(module, cls):
            return tag_name
    return None


def describe_model(model: nn.Module, name: Optional[str] = None) -> ArchitectureSpec:
    """
    ArchitectureSpec view of a live model. Each normalization layer is one group of
    shape (n_affine_tensors, C); every other parameter is its own group. Injected
    LoRA adapters are not part of the base architecture and are skipped.
    """
    groups: List[ParamGroup] = []

    def walk(module: nn.Module, prefix: str, inherited: FrozenSet[str]):
        if isinstance(module, LoRAAdapter):
            return
        tags = inherited | getattr(module, "sac_tags", frozenset())
        direct = [(n, p) for n, p in module.named_parameters(recurse=False)]
        norm = _norm_tag(module)
        if norm and direct:
            shapes = {tuple(p.shape) for _, p in direct}
            shape = (len(direct),) + shapes.pop() if len(shapes) == 1 else (sum(p.numel() for _, p in direct),)
            members = tuple(f"{prefix}{n}" for n, _ in direct)
            groups.append(ParamGroup(prefix.rstrip("."), shape, tags | {norm}, members))
        else:
            for n, p in direct:
                full = f"{prefix}{n}"
                groups.append(ParamGroup(full, tuple(p.shape), tags, (full,)))
        for child_name, child in module.named_children():
            walk(child, f"{prefix}{child_name}.", tags)

    walk(model, "", frozenset())
    return ArchitectureSpec(name or type(model).__name__, groups)


def _as_spec(spec_or_model: Union[ArchitectureSpec, nn.Module]) -> ArchitectureSpec:
    if isinstance(spec_or_model, ArchitectureSpec):
        return spec_or_model
    if isinstance(spec_or_model, nn.Module):
        return describe_model(spec_or_model)
    raise SelectionError(f"Cannot select parameters from a {type(spec_or_model).__name__}")


# --- Selection ---

def _require_tags(spec: ArchitectureSpec, tags: Iterable[str]):
    missing = sorted(t for t in tags if t not in spec.all_tags)
    if missing:
        raise SelectionError(f"Plan references tags absent from '{spec.name}': {missing}")


def _lora_sites(spec: ArchitectureSpec, plan: TuningPlan) -> Tuple[AdapterSite, ...]:
    _require_tags(spec, ("encoder",) + plan.lora_targets)
    candidates = [
        g for g in spec.groups
        if "encoder" in g.tags and len(g.shape) == 2 and any(t in g.tags for t in plan.lora_targets)
    ]
    if plan.last_k_blocks is not None:
        blocks = sorted({g.block for g in candidates if g.block is not None}, reverse=True)
        if plan.last_k_blocks > len(blocks):
            raise SelectionError(
                f"Plan asks for the last {plan.last_k_blocks} blocks but '{spec.name}' has {len(blocks)} targetable blocks"
            )
        keep = set(blocks[:plan.last_k_blocks])
        candidates = [g for g in candidates if g.block in keep]
    return tuple(
        AdapterSite(g.name, d_in=g.shape[1], d_out=g.shape[0], rank=plan.lora_rank, block=g.block)
        for g in candidates
    )


def select_trainables(spec_or_model, plan: TuningPlan) -> Selection:
    """Resolve a plan to group names (and adapter sites for LoRA), in spec order."""
    spec = _as_spec(spec_or_model)
    strategy = plan.strategy

    if strategy == "none":
        return Selection()
    if strategy == "full":
        return Selection(tuple(g.name for g in spec.groups))
    if strategy == "norm_only":
        groups = [g.name for g in spec.groups if g.is_norm]
        if not groups:
            raise SelectionError(f"Plan references tags absent from '{spec.name}': ['norm-*']")
        return Selection(tuple(groups))

    wanted = set()
    if strategy in ("decoder_only", "composite_cracksam"):
        wanted.add("decoder")
    if strategy == "composite_cracksam" or plan.include_prompt_encoder:
        wanted.add("prompt-encoder")
    _require_tags(spec, wanted)
    groups = tuple(g.name for g in spec.groups if g.tags & wanted)
    adapters = _lora_sites(spec, plan) if plan.uses_lora else ()
    return Selection(groups, adapters)


def audit_budget(spec_or_model, plan: TuningPlan) -> ParamBudget:
    """Trainable parameter count of a plan: selected groups plus injected adapters."""
    spec = _as_spec(spec_or_model)
    selection = select_trainables(spec, plan)
    breakdown = {name: spec.group(name).size for name in selection.groups}
    for site in selection.adapters:
        breakdown[f"{site.group}.lora"] = site.num_params
    adapter_count = sum(s.num_params for s in selection.adapters)
    trainable = sum(breakdown.values())
    budget = ParamBudget(trainable, spec.group_total, breakdown, adapter_count)
    logger.debug(f"{plan.describe()} on {spec.name}: {trainable:,} trainable ({budget.percent:.4f}%)")
    return budget


def component_totals(spec: ArchitectureSpec, budget: ParamBudget) -> Dict[str, int]:
    """Fold a budget's per-group breakdown into encoder / decoder / prompt-encoder / lora."""
    totals: Dict[str, int] = {}
    for name, count in budget.breakdown.items():
        if name.endswith(".lora") and name not in spec:
            key = "lora"
        else:
            tags = spec.group(name).tags
            key = next((t for t in ("encoder", "decoder", "prompt-encoder") if t in tags), "other")
        totals[key] = totals.get(key, 0) + count
    return totals


# --- Applying plans to live models ---

def apply_plan(model: nn.Module, plan: TuningPlan, generator: Optional[torch.Generator] = None) -> Selection:
    """
    Inject adapters and set requires_grad so that exactly the plan's selection trains.
    Idempotent: re-applying the same plan reuses existing adapters.
    """
    spec = describe_model(model)
    selection = select_trainables(spec, plan)
    for site in selection.adapters:
        module_path = site.group.rsplit(".", 1)[0]
        inject_lora(model.get_submodule(module_path), site.rank, generator=generator)

    selected = selected_parameter_names(model, selection, spec)
    for name, param in model.named_parameters():
        param.requires_grad_(name in selected)
    n_train = sum(p.numel() for p in model.parameters() if p.requires_grad)
    logger.info(f"Applied plan {plan.describe()}: {len(selected)} tensors, {n_train:,} trainable parameters")
    return selection


def selected_parameter_names(model: nn.Module, selection: Selection,
                             spec: Optional[ArchitectureSpec] = None) -> FrozenSet[str]:
    spec = spec or describe_model(model)
    names = set()
    for group_name in selection.groups:
        names.update(spec.group(group_name).members)
    for site in selection.adapters:
        module_path = site.group.rsplit(".", 1)[0]
        names.update({f"{module_path}.lora.A", f"{module_path}.lora.B"})
    return frozenset(names)


def trainable_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


# --- Freeze audit ---

@dataclass
class FreezeReport:
    passed: bool
    frozen_changed: List[str]
    selected_changed: List[str]
    max_frozen_delta: float

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state}: {len(self.frozen_changed)} frozen tensors changed "
                f"(max |delta| {self.max_frozen_delta:g}), {len(self.selected_changed)} selected tensors changed")


def snapshot_parameters(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def assert_frozen(model: nn.Module, plan_or_selection: Union[TuningPlan, Selection],
                  before: Dict[str, torch.Tensor], after: Dict[str, torch.Tensor],
                  require_change: bool = True) -> FreezeReport:
    """
    Compare two parameter snapshots. Passes iff every non-selected tensor is bit-identical
    and, when anything is selected, at least one selected tensor moved.
    """
    if set(before) != set(after):
        raise AuditError(f"Snapshots cover different parameters: {sorted(set(before) ^ set(after))[:5]}")
    selection = plan_or_selection
    if isinstance(plan_or_selection, TuningPlan):
        selection = select_trainables(model, plan_or_selection)
    selected = selected_parameter_names(model, selection)

    frozen_changed, selected_changed = [], []
    max_delta = 0.0
    for name, old in before.items():
        new = after[name]
        if old.shape != new.shape:
            raise AuditError(f"Snapshot shape mismatch for '{name}': {tuple(old.shape)} vs {tuple(new.shape)}")
        if torch.equal(old, new):
            continue
        if name in selected:
            selected_changed.append(name)
        else:
            frozen_changed.append(name)
            max_delta = max(max_delta, float((new - old).abs().max()))

    passed = not frozen_changed
    if require_change and selected:
        passed = passed and bool(selected_changed)
    report = FreezeReport(passed, frozen_changed, selected_changed, max_delta)
    if not report.passed:
        logger.warning(f"Freeze audit {report.summary()}")
    return report
