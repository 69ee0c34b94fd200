"""Model slimming: filter pruning and quantization-aware training.

Pruning scores each conv filter by its Euclidean distance to the geometric
median of the layer's filters, scans per-layer sensitivity on a held-out
metric, and removes whole filters together with the matching batchnorm
channels and consumer input channels.  Quantization wraps conv/linear
weights with symmetric fake-quantization and activations with a trainable
clipping threshold, skipping recurrent layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .detdb import DetModel
from .nnblocks import BatchNorm2d, Conv2d, ConvBNAct, Linear, Module, param_count
from .numcore import Tensor

# ---------------------------------------------------------------------------
# geometric median and filter selection
# ---------------------------------------------------------------------------


def geometric_median(points, tol: float = 1e-9, max_iter: int = 500) -> np.ndarray:
    """Point minimizing the sum of Euclidean distances (Weiszfeld iteration).

    When an iterate lands on a data point the plain update is undefined;
    the modified rule mixes the single-point pull back in, which keeps the
    iteration convergent from any start.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) == 0:
        raise ValueError("geometric_median needs at least one point")
    if len(pts) == 1:
        return pts[0].copy()
    y = pts.mean(axis=0)
    for _ in range(max_iter):
        dist = np.linalg.norm(pts - y, axis=1)
        on_point = dist < 1e-12
        if on_point.all():
            return y  # all points coincide with the iterate
        inv = np.where(on_point, 0.0, 1.0 / np.maximum(dist, 1e-300))
        t = (pts * inv[:, None]).sum(axis=0) / inv.sum()
        if on_point.any():
            # modified Weiszfeld: r is the pull of the non-coinciding points;
            # if it cannot overcome the coinciding points' weight, y is optimal
            r = ((pts - y) * inv[:, None]).sum(axis=0)
            r_norm = np.linalg.norm(r)
            m = float(on_point.sum())
            if r_norm <= m:
                return y
            gamma = m / r_norm
            y_next = (1.0 - gamma) * t + gamma * y
        else:
            y_next = t
        step = np.linalg.norm(y_next - y)
        y = y_next
        if step < tol:
            break
    return y


def fpgm_select(conv_weight, ratio: float) -> np.ndarray:
    """Indices of the floor(ratio*O) filters closest to the geometric median.

    Ties are broken toward the lower index.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")
    w = conv_weight.data if isinstance(conv_weight, Tensor) else np.asarray(conv_weight)
    flat = w.reshape(len(w), -1).astype(np.float64)
    k = int(np.floor(ratio * len(flat)))
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    median = geometric_median(flat)
    dist = np.linalg.norm(flat - median, axis=1)
    order = np.lexsort((np.arange(len(flat)), dist))
    return np.sort(order[:k])


# ---------------------------------------------------------------------------
# structured pruning
# ---------------------------------------------------------------------------


@dataclass
class PrunePlan:
    """Per-layer filter removals plus bookkeeping for the bundle manifest."""

    layers: list = field(default_factory=list)  # (layer id, sorted index list)
    global_ratio: float = 0.0
    sensitivity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layers": [[name, [int(i) for i in idx]] for name, idx in self.layers],
            "global_ratio": self.global_ratio,
            "sensitivity": {k: [[float(r), float(d)] for r, d in v]
                            for k, v in self.sensitivity.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "PrunePlan":
        return PrunePlan([(name, list(idx)) for name, idx in d["layers"]],
                         d["global_ratio"],
                         {k: [tuple(p) for p in v]
                          for k, v in d.get("sensitivity", {}).items()})


class PruneUnit:
    """One prunable conv plus every array sliced by the same filter index set.

    ``actions`` is a list of (owner, attribute, axis) triples; the attribute
    is either a parameter Tensor or a plain ndarray buffer.  ``finalize`` is
    called with the surviving filter count so channel metadata (group counts,
    config widths) stays consistent with the arrays.
    """

    def __init__(self, name, conv, actions, finalize=None):
        self.name = name
        self.conv = conv
        self.actions = actions
        self.finalize = finalize

    @property
    def count(self) -> int:
        return self.conv.weight.shape[0]

    def params_per_filter(self) -> int:
        total = 0
        for owner, attr, axis in self.actions:
            arr = getattr(owner, attr)
            if isinstance(arr, Tensor) and arr.requires_grad:
                total += arr.data.size // arr.data.shape[axis]
        return total

    def apply(self, remove_idx) -> None:
        keep = np.setdiff1d(np.arange(self.count), remove_idx)
        for owner, attr, axis in self.actions:
            arr = getattr(owner, attr)
            if isinstance(arr, Tensor):
                arr.data = np.take(arr.data, keep, axis=axis)
                arr.grad = None
            else:
                setattr(owner, attr, np.take(arr, keep, axis=axis))
        if self.finalize is not None:
            self.finalize(len(keep))


def _bn_actions(bn: BatchNorm2d):
    return [(bn, "gamma", 0), (bn, "beta", 0),
            (bn, "running_mean", 0), (bn, "running_var", 0)]


class ChainUnit(PruneUnit):
    """Unit for a ConvBNAct whose output feeds the given consumer convs.

    Each consumer is (conv, offset) where offset is the producer's starting
    input channel inside that conv — either an int or a zero-argument
    callable, the latter when earlier pruning can shift the concatenation
    layout before this unit is applied.
    """

    def __init__(self, name, layer: ConvBNAct, consumers, finalize=None):
        actions = ([(layer.conv, "weight", 0)] + _bn_actions(layer.bn)
                   + [(conv, "weight", 1) for conv, _ in consumers])
        super().__init__(name, layer.conv, actions, finalize)
        self.layer = layer
        self.consumers = consumers

    def apply(self, remove_idx) -> None:
        keep = np.setdiff1d(np.arange(self.count), remove_idx)
        conv, bn = self.layer.conv, self.layer.bn
        conv.weight.data = np.take(conv.weight.data, keep, axis=0)
        conv.weight.grad = None
        for owner, attr, axis in _bn_actions(bn):
            val = getattr(owner, attr)
            if isinstance(val, Tensor):
                val.data = np.take(val.data, keep, axis=axis)
                val.grad = None
            else:
                setattr(owner, attr, np.take(val, keep, axis=axis))
        for consumer, offset in self.consumers:
            if callable(offset):
                offset = offset()
            removed = np.asarray(remove_idx, dtype=np.intp) + offset
            keep_in = np.setdiff1d(np.arange(consumer.weight.shape[1]), removed)
            consumer.weight.data = np.take(consumer.weight.data, keep_in, axis=1)
            consumer.weight.grad = None
        if self.finalize is not None:
            self.finalize(len(keep))


def _expand_unit(name: str, block) -> PruneUnit:
    """Unit for an inverted-residual expand conv: prunes the expansion width."""
    layer = block.expand
    actions = [(layer.conv, "weight", 0)] + _bn_actions(layer.bn)
    actions.append((block.depthwise.conv, "weight", 0))
    actions.extend(_bn_actions(block.depthwise.bn))
    if block.se is not None:
        actions.append((block.se.fc1, "weight", 0))
        actions.append((block.se.fc2, "weight", 1))
        actions.append((block.se.fc2, "bias", 0))
    actions.append((block.project.conv, "weight", 1))

    def finalize(new_count):
        block.depthwise.conv.groups = new_count
        block.spec.expand_ch = new_count

    return PruneUnit(name, layer.conv, actions, finalize)


def prune_units(model) -> list:
    """Prunable units of a supported model, in a stable order."""
    if isinstance(model, DetModel):
        units = []
        for i, block in enumerate(model.backbone.blocks):
            unit = _expand_unit(f"backbone.blocks.{i}.expand", block)

            def expand_fin(new_count, inner_fin=unit.finalize,
                           cfg_block=model.backbone_config.blocks[i]):
                inner_fin(new_count)
                cfg_block.expand_ch = new_count

            unit.finalize = expand_fin
            units.append(unit)
        head = model.head
        cfg = model.head_config
        towers = [t[0].conv for t in (head.prob_tower, head.thresh_tower)]
        for j, smooth in enumerate(head.smooths):
            def offset_fn(cfg=cfg, j=j):
                return int(sum(cfg.smooth_channels[:j]))

            def smooth_fin(new_count, cfg=cfg, j=j):
                cfg.smooth_channels[j] = new_count

            units.append(ChainUnit(f"head.smooths.{j}", smooth,
                                   [(c, offset_fn) for c in towers], smooth_fin))
        for tname, tower, attr in (("prob_tower", head.prob_tower,
                                    "prob_tower_channels"),
                                   ("thresh_tower", head.thresh_tower,
                                    "thresh_tower_channels")):

            def tower_fin(new_count, cfg=cfg, attr=attr):
                setattr(cfg, attr, new_count)

            units.append(ChainUnit(f"head.{tname}.0", tower[0],
                                   [(tower[1], 0)], tower_fin))
        return units
    if hasattr(model, "prune_units"):
        return model.prune_units()
    raise ValueError(f"no prunable layers known for {type(model).__name__}")


def plan_param_drop(model, plan: PrunePlan) -> int:
    """Analytic number of parameters a plan removes, without applying it.

    Counted per tensor so that overlapping removals (an output filter of one
    unit and an input channel of another hitting the same weight) are not
    double-counted.
    """
    units = {u.name: u for u in prune_units(model)}
    removed = {}  # id(tensor) -> (shape, {axis: removal count})
    for name, idx in plan.layers:
        if name not in units:
            raise ValueError(f"plan references non-prunable layer {name!r}")
        for owner, attr, axis in units[name].actions:
            arr = getattr(owner, attr)
            if not (isinstance(arr, Tensor) and arr.requires_grad):
                continue
            shape, counts = removed.setdefault(id(arr), (arr.data.shape, {}))
            counts[axis] = counts.get(axis, 0) + len(idx)
    total = 0
    for shape, counts in removed.values():
        new_shape = [n - counts.get(ax, 0) for ax, n in enumerate(shape)]
        total += int(np.prod(shape) - np.prod(new_shape))
    return total


def apply_prune(model, plan: PrunePlan):
    """New, smaller model with the plan's filters removed (input untouched)."""
    pruned = copy.deepcopy(model)
    units = {u.name: u for u in prune_units(pruned)}
    for name, idx in plan.layers:
        if name not in units:
            raise ValueError(f"plan references non-prunable layer {name!r}")
        unit = units[name]
        idx = np.asarray(sorted(int(i) for i in idx), dtype=np.intp)
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"duplicate filter indices for layer {name!r}")
        if len(idx) and (idx[0] < 0 or idx[-1] >= unit.count):
            raise ValueError(f"filter index out of range for layer {name!r}")
        if unit.count - len(idx) < 2:
            raise ValueError(
                f"layer {name!r} would keep {unit.count - len(idx)} filters; "
                "minimum is 2")
        unit.apply(idx)
    return pruned


def sensitivity_scan(model, eval_fn, ratios) -> dict:
    """Per-layer metric drop when pruning that layer alone at each ratio.

    Returns {layer id: [(ratio, drop)]} where drop is baseline minus the
    metric after pruning (higher metric assumed better).
    """
    baseline = float(eval_fn(model))
    curves = {}
    for unit in prune_units(model):
        points = []
        for ratio in ratios:
            idx = fpgm_select(unit.conv.weight, ratio)
            if unit.count - len(idx) < 2:
                continue
            plan = PrunePlan(layers=[(unit.name, list(idx))])
            metric = float(eval_fn(apply_prune(model, plan)))
            points.append((float(ratio), baseline - metric))
        curves[unit.name] = points
    return curves


def allocate(model, curves: dict, target_global_ratio: float,
             max_drop: float) -> PrunePlan:
    """Greedy plan: least-sensitive layers absorb their largest safe ratio
    first, until the parameter-weighted global ratio reaches the target.
    """
    if not 0.0 <= target_global_ratio < 1.0:
        raise ValueError(f"target ratio must be in [0, 1), got {target_global_ratio}")
    units = {u.name: u for u in prune_units(model)}
    total = param_count(model)
    choices = []  # (drop at best ratio, name, best ratio)
    for name, points in curves.items():
        if name not in units:
            raise ValueError(f"sensitivity curve for unknown layer {name!r}")
        safe = [(r, d) for r, d in points if d <= max_drop]
        if not safe:
            continue
        best_r, drop = max(safe, key=lambda p: p[0])
        if best_r > 0:
            choices.append((drop, name, best_r))
    choices.sort(key=lambda c: (c[0], c[1]))
    plan = PrunePlan(sensitivity=dict(curves))
    removed = 0
    for drop, name, ratio in choices:
        if removed >= target_global_ratio * total:
            break
        idx = fpgm_select(units[name].conv.weight, ratio)
        if units[name].count - len(idx) < 2 or len(idx) == 0:
            continue
        plan.layers.append((name, [int(i) for i in idx]))
        removed = plan_param_drop(model, plan)
    realized = removed / total
    if realized < target_global_ratio:
        raise ValueError(
            f"max_drop={max_drop} caps the global prune ratio at "
            f"{realized:.4f}, below the target {target_global_ratio}")
    plan.global_ratio = realized
    return plan


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------


@dataclass
class PactParam:
    """Trainable activation clipping threshold."""

    alpha: Tensor
    variant: str  # "original" (clip to [0, a]) or "modified" ([-a, a])
    l2_coeff: float = 0.001

    def __post_init__(self):
        if self.variant not in ("original", "modified"):
            raise ValueError(f"unknown pact variant {self.variant!r}")
        if not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(np.asarray(float(self.alpha)), requires_grad=True)

    def clamp(self, floor: float = 1e-6) -> None:
        """Keep alpha positive; call after each optimizer step."""
        self.alpha.data = np.maximum(self.alpha.data, floor)


def pact(x: Tensor, p: PactParam) -> Tensor:
    """Clip activations at a trainable threshold.

    The original variant clips to [0, alpha]; the modified variant is the
    odd extension clipping to [-alpha, alpha].  Gradients pass through
    unchanged strictly inside the clipping interval; alpha receives +1
    where the upper clip binds and (modified only) -1 where the lower one
    binds.
    """
    a = float(p.alpha.data)
    xd = x.data
    if p.variant == "original":
        out = np.clip(xd, 0.0, a)
        inside = (xd > 0.0) & (xd < a)
        d_alpha = (xd >= a).astype(np.float64)
    else:
        out = np.clip(xd, -a, a)
        inside = (xd > -a) & (xd < a)
        d_alpha = (xd >= a).astype(np.float64) - (xd <= -a).astype(np.float64)

    def backward(g):
        return g * inside, np.asarray((g * d_alpha).sum()).reshape(p.alpha.shape)

    return nc._make(out, (x, p.alpha), backward)


def pact_regularizer(pact_params) -> Tensor:
    """L2 penalty on the clipping thresholds, added to the training loss."""
    terms = [p.alpha * p.alpha * p.l2_coeff for p in pact_params]
    if not terms:
        return Tensor(np.asarray(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def fake_quant(x: Tensor, bits: int, qrange: float) -> Tensor:
    """Symmetric uniform fake-quantization with a straight-through gradient."""
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    if qrange <= 0.0:
        return x  # degenerate all-zero range: nothing to quantize
    delta = qrange / (2 ** (bits - 1) - 1)
    clipped = np.clip(x.data, -qrange, qrange)
    out = np.round(clipped / delta) * delta
    inside = np.abs(x.data) <= qrange

    def backward(g):
        return (g * inside,)

    return nc._make(out, (x,), backward)


@dataclass
class QuantRecord:
    layer: str  # module path of the conv/linear
    bits: int = 8
    weight_scale: float = 0.0
    activation_alpha: float = 0.0
    skipped: bool = False
    pact_param: PactParam = None  # live handle; not serialized

    def to_dict(self) -> dict:
        return {"layer": self.layer, "bits": self.bits,
                "weight_scale": self.weight_scale,
                "activation_alpha": self.activation_alpha,
                "skipped": self.skipped}

    @staticmethod
    def from_dict(d: dict) -> "QuantRecord":
        return QuantRecord(d["layer"], d["bits"], d["weight_scale"],
                           d["activation_alpha"], d["skipped"])


def _weight_quant_fn(bits):
    def quant(w: Tensor) -> Tensor:
        return fake_quant(w, bits, float(np.abs(w.data).max(initial=0.0)))
    return quant


def quantize_model(model: Module, bits: int = 8, alpha_init: float = 6.0):
    """Wrap conv/linear weights and activations for quantization-aware training.

    Weights get symmetric fake-quantization with the range re-read from the
    live weights on every forward.  Activations after each fused conv get a
    trainable clip: the modified (symmetric) variant after hard_swish, the
    original one-sided variant after relu.  Recurrent layers are skipped.

    Returns (model, records); the model is modified in place and the records
    carry the live PactParam handles whose alphas must join the optimizer.
    """
    records = []
    wrapped_convs = set()
    for name, module in model.named_modules():
        if type(module).__name__ == "BiLSTM":
            records.append(QuantRecord(name, bits, skipped=True))
            continue
        if isinstance(module, ConvBNAct):
            module.conv.weight_quant = _weight_quant_fn(bits)
            wrapped_convs.add(id(module.conv))
            rec = QuantRecord(name + ".conv", bits)
            if module.act is not None:
                variant = "modified" if module.act == "hard_swish" else "original"
                p = PactParam(Tensor(np.asarray(alpha_init), requires_grad=True),
                              variant)
                module.act_quant = lambda t, _p=p: pact(t, _p)
                rec.pact_param = p
                rec.activation_alpha = alpha_init
            records.append(rec)
    for name, module in model.named_modules():
        if isinstance(module, (Conv2d, Linear)) and id(module) not in wrapped_convs:
            if module.weight_quant is None:
                module.weight_quant = _weight_quant_fn(bits)
                records.append(QuantRecord(name, bits))
    _refresh_scales(model, records)
    return model, records


def _refresh_scales(model: Module, records) -> None:
    """Update each record's export-time weight scale and alpha snapshot."""
    modules = dict(model.named_modules())
    for rec in records:
        if rec.skipped:
            continue
        mod = modules[rec.layer]
        levels = 2 ** (rec.bits - 1) - 1
        rec.weight_scale = float(np.abs(mod.weight.data).max(initial=0.0)) / levels
        if rec.pact_param is not None:
            rec.activation_alpha = float(rec.pact_param.alpha.data)


def quantized_weight_names(model: Module, records) -> dict:
    """Map of parameter name -> QuantRecord for int8 export."""
    out = {}
    for rec in records:
        if not rec.skipped:
            out[rec.layer + ".weight"] = rec
    return out


def finalize_quantization(model: Module, records) -> None:
    """Bake the fake-quantized weights in and refresh export scales.

    After this the stored float weights equal their quantized values, so an
    int8 export followed by dequantization reproduces them bit-for-bit.
    """
    _refresh_scales(model, records)
    modules = dict(model.named_modules())
    for rec in records:
        if rec.skipped or rec.weight_scale == 0.0:
            continue
        mod = modules[rec.layer]
        levels = 2 ** (rec.bits - 1) - 1
        q = np.clip(np.round(mod.weight.data / rec.weight_scale), -levels, levels)
        mod.weight.data = q * rec.weight_scale
        mod.weight_quant = None  # weights are already on the grid
