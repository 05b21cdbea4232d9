"""Constrained architecture exploration.

Candidates are produced by seeded graph mutations of a seed prototype,
scored by a proxy training run, filtered by a hard feasibility indicator
(accuracy floor, parameter ceiling) and ranked by a NetScore-style
performance score.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .arch import (ArchError, ArchSpec, LayerNode, count_params, infer_shapes, serialize,
                   spec_from_dict, spec_to_dict, validate_and_toposort)
from .data import Sample, make_folds
from .trainer import ModelState, TrainConfig, evaluate, inherit_params, init_state, train

logger = logging.getLogger(__name__)

KNOBS = ("channels", "edge", "kernel", "block")
MAX_REJECTIONS = 100


@dataclass(frozen=True)
class Constraints:
    min_accuracy: float = 0.92
    max_params: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.min_accuracy:
            raise ValueError("min_accuracy must be positive")
        if self.max_params <= 0:
            raise ValueError("max_params must be positive")


@dataclass
class CandidateRecord:
    spec: ArchSpec
    accuracy: float
    params: int
    macs: int
    u_score: float | None
    feasible: bool
    iteration: int = 0

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "accuracy": self.accuracy,
                           "params": self.params, "macs": self.macs, "u_score": self.u_score,
                           "feasible": self.feasible, "spec": spec_to_dict(self.spec)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CandidateRecord":
        d = json.loads(line)
        return cls(spec_from_dict(d["spec"]), d["accuracy"], d["params"], d["macs"],
                   d["u_score"], d["feasible"], d["iteration"])


def indicator(record, constraints: Constraints) -> int:
    """1 when accuracy >= floor and params <= ceiling, else 0."""
    acc, params = (record.accuracy, record.params) if hasattr(record, "accuracy") else record
    return int(acc >= constraints.min_accuracy and params <= constraints.max_params)


def u_score(accuracy: float, params: int, macs: int, alpha: float = 2.0, beta: float = 0.5,
            gamma: float = 0.5) -> float:
    """20*log10((100*acc)^alpha / (params_M^beta * macs_M^gamma)).

    Parameter and MAC counts are in millions, floored at 1e-3.
    """
    if not accuracy > 0:
        raise ValueError("u_score is undefined for accuracy <= 0")
    p = max(params / 1e6, 1e-3)
    m = max(macs / 1e6, 1e-3)
    return 20.0 * (alpha * math.log10(100.0 * accuracy) - beta * math.log10(p)
                   - gamma * math.log10(m))


def structure_key(spec: ArchSpec) -> str:
    """Hash of the graph structure, ignoring the spec name."""
    return hashlib.sha256(serialize(replace(spec, name="")).encode()).hexdigest()


# --------------------------------------------------------------------------
# mutation

@dataclass(frozen=True)
class MutationRates:
    channels: float = 0.5
    edge: float = 0.2
    kernel: float = 0.2
    block: float = 0.1

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in KNOBS}


def _channel_groups(spec: ArchSpec) -> list[list[str]]:
    """Conv nodes whose widths are tied together by add merges.

    Groups that also contain a non-conv channel source (e.g. a concat feeding
    an add) cannot be rescaled and are left out.
    """
    by_id = spec.by_id
    parent: dict[str, str] = {}

    def find(a):
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        parent[find(a)] = find(b)

    source: dict[str, str] = {}
    for n in validate_and_toposort(spec):
        if n.kind in ("conv", "concat", "global_avg_pool", "dense"):
            source[n.id] = n.id
            find(n.id)
        elif n.kind == "add":
            for s in n.inputs[1:]:
                union(source[n.inputs[0]], source[s])
            source[n.id] = source[n.inputs[0]]
        else:
            source[n.id] = source[n.inputs[0]]
    groups: dict[str, list[str]] = {}
    for nid in parent:
        groups.setdefault(find(nid), []).append(nid)
    out = []
    for members in groups.values():
        if all(by_id[m].kind == "conv" for m in members):
            out.append(sorted(members, key=[n.id for n in spec.nodes].index))
    return sorted(out, key=lambda g: [n.id for n in spec.nodes].index(g[0]))


def _descendants(spec: ArchSpec, node_id: str) -> set[str]:
    cons = spec.consumers()
    seen, stack = set(), [node_id]
    while stack:
        for c in cons[stack.pop()]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def _replace_node(spec: ArchSpec, node: LayerNode) -> ArchSpec:
    return spec.with_nodes(node if n.id == node.id else n for n in spec.nodes)


def _mutate_channels(spec, rng, width_choices):
    groups = _channel_groups(spec)
    if not groups:
        return None
    group = groups[rng.integers(len(groups))]
    by_id = spec.by_id
    old = by_id[group[0]].out_channels
    if width_choices:
        options = [w for w in width_choices if w != old]
        if not options:
            return None
        new = int(options[rng.integers(len(options))])
    else:
        new = max(4, int(round(old * (0.75, 1.25)[rng.integers(2)])))
    if new == old:
        return None
    members = set(group)
    return spec.with_nodes(replace(n, out_channels=new) if n.id in members else n
                           for n in spec.nodes)


def _mutate_kernel(spec, rng, _choices):
    convs = [n for n in spec.nodes if n.kind == "conv"]
    if not convs:
        return None
    n = convs[rng.integers(len(convs))]
    k = (3, 3) if n.kernel == (1, 1) else (1, 1)
    return _replace_node(spec, replace(n, kernel=k))


def _mutate_edge(spec, rng, _choices):
    merges = [n for n in spec.nodes if n.kind in ("add", "concat")]
    if not merges:
        return None
    m = merges[rng.integers(len(merges))]
    if rng.random() < 0.5 and len(m.inputs) > 2:
        drop = m.inputs[rng.integers(len(m.inputs))]
        new = replace(m, inputs=tuple(s for s in m.inputs if s != drop))
        cand = _replace_node(spec, new)
        if not cand.consumers()[drop] and drop != cand.output_node:
            return None  # would leave a dead branch
        return cand
    shapes = infer_shapes(spec)
    banned = _descendants(spec, m.id) | {m.id} | set(m.inputs)
    target = shapes[m.inputs[0]]
    options = []
    for n in spec.nodes:
        if n.id in banned or n.kind in ("global_avg_pool", "dense", "softmax_head"):
            continue
        s = shapes[n.id]
        if (m.kind == "add" and s == target) or (m.kind == "concat" and s[1:] == target[1:]):
            options.append(n.id)
    if not options:
        return None
    src = options[rng.integers(len(options))]
    new_spec = _replace_node(spec, replace(m, inputs=m.inputs + (src,)))
    # keep declaration order topological: the merge must follow its new input
    ids = [n.id for n in new_spec.nodes]
    if ids.index(src) > ids.index(m.id):
        return _reorder(new_spec)
    return new_spec


def _reorder(spec: ArchSpec) -> ArchSpec:
    return spec.with_nodes(validate_and_toposort(spec))


def _fresh_prefix(spec: ArchSpec) -> str:
    ids = {n.id for n in spec.nodes}
    k = 0
    while any(i.startswith(f"mb{k}_") for i in ids):
        k += 1
    return f"mb{k}"


def _mutate_block(spec, rng, _choices):
    if rng.random() < 0.5:
        return _insert_block(spec, rng)
    return _remove_block(spec, rng)


def _insert_block(spec: ArchSpec, rng) -> ArchSpec | None:
    by_id = spec.by_id
    cons = spec.consumers()

    def is_boundary_consumer(cid):
        c = by_id[cid]
        return c.kind == "global_avg_pool" or (c.kind == "conv" and max(c.stride) > 1)

    sites = [n.id for n in spec.nodes if any(is_boundary_consumer(c) for c in cons[n.id])]
    if not sites:
        return None
    x = sites[rng.integers(len(sites))]
    width = infer_shapes(spec)[x][0]
    p = _fresh_prefix(spec)
    block = [
        LayerNode(f"{p}_c1", "conv", (x,), kernel=(3, 3), out_channels=width),
        LayerNode(f"{p}_c1_relu", "relu", (f"{p}_c1",)),
        LayerNode(f"{p}_c2", "conv", (f"{p}_c1_relu",), kernel=(3, 3), out_channels=width),
        LayerNode(f"{p}_add", "add", (x, f"{p}_c2")),
    ]
    nodes = []
    for n in spec.nodes:
        nodes.append(n)
        if n.id == x:
            nodes.extend(block)
    rewired = []
    for n in nodes:
        if n.id in cons[x] and is_boundary_consumer(n.id):
            n = replace(n, inputs=tuple(f"{p}_add" if s == x else s for s in n.inputs))
        rewired.append(n)
    return spec.with_nodes(rewired)


def _remove_block(spec: ArchSpec, rng) -> ArchSpec | None:
    by_id = spec.by_id
    cons = spec.consumers()
    found = []
    for a in spec.nodes:
        if a.kind != "add" or len(a.inputs) != 2:
            continue
        for x, c2 in (a.inputs, a.inputs[::-1]):
            n2 = by_id[c2]
            if n2.kind != "conv" or cons[c2] != [a.id] or not n2.inputs:
                continue
            r = by_id[n2.inputs[0]]
            if r.kind != "relu" or cons[r.id] != [c2]:
                continue
            c1 = by_id[r.inputs[0]]
            if c1.kind != "conv" or cons[c1.id] != [r.id] or c1.inputs != (x,):
                continue
            found.append((a.id, x, (c1.id, r.id, c2, a.id)))
            break
    if not found:
        return None
    add_id, x, doomed = found[rng.integers(len(found))]
    nodes = []
    for n in spec.nodes:
        if n.id in doomed:
            continue
        if add_id in n.inputs:
            n = replace(n, inputs=tuple(x if s == add_id else s for s in n.inputs))
        nodes.append(n)
    out_node = x if spec.output_node == add_id else spec.output_node
    return replace(spec, nodes=tuple(nodes), output_node=out_node)


_KNOB_FNS = {"channels": _mutate_channels, "edge": _mutate_edge,
             "kernel": _mutate_kernel, "block": _mutate_block}


def mutate(spec: ArchSpec, rng: np.random.Generator, rates: MutationRates | dict | None = None,
           width_choices: Sequence[int] | None = None) -> ArchSpec:
    """Apply one or more randomly chosen knobs to ``spec``.

    Each knob fires independently with its rate; if none fires (and some
    rate is positive) one is drawn in proportion to the rates. Proposals
    that fail validation or shape inference are resampled. After
    ``MAX_REJECTIONS`` rejections the input is returned unchanged.

    With ``width_choices`` the channel knob picks a new width from that set
    instead of scaling by 0.75 or 1.25.
    """
    rates = rates.as_dict() if isinstance(rates, MutationRates) else dict(rates or MutationRates().as_dict())
    unknown = set(rates) - set(KNOBS)
    if unknown:
        raise ValueError(f"unknown mutation knob(s) {sorted(unknown)}")
    weights = np.array([max(0.0, float(rates.get(k, 0.0))) for k in KNOBS])
    if weights.sum() == 0:
        return spec
    chosen = [k for k, w in zip(KNOBS, weights) if rng.random() < w]
    if not chosen:
        chosen = [KNOBS[rng.choice(len(KNOBS), p=weights / weights.sum())]]
    current, rejections = spec, 0
    for knob in chosen:
        while True:
            try:
                cand = _KNOB_FNS[knob](current, rng, width_choices)
                if cand is not None:
                    validate_and_toposort(cand)
                    infer_shapes(cand)
            except ArchError:
                cand = None
            if cand is not None:
                current = cand
                break
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                return spec
    return current


# --------------------------------------------------------------------------
# search

@dataclass
class SearchConfig:
    iterations: int = 10
    population: int = 4
    rates: MutationRates = field(default_factory=MutationRates)
    width_choices: tuple[int, ...] | None = None
    proxy_epochs: int = 40
    proxy_subset: int | None = None
    seed: int = 0
    coeffs: tuple[float, float, float] = (2.0, 0.5, 0.5)
    warm_start: bool = False
    max_attempts: int = 200

    def __post_init__(self):
        if self.iterations < 0 or self.population < 1 or self.proxy_epochs < 1:
            raise ValueError("search budgets must be positive")
        if self.proxy_subset is not None and self.proxy_subset < 1:
            raise ValueError("proxy_subset must be positive")


class ProxyEvaluator:
    """Short training run on a fixed subject-independent 80/20 split.

    Always initialised from the same seed, so a spec's score does not depend
    on when it is evaluated. Underestimates full-protocol accuracy.
    """

    def __init__(self, samples: Sequence[Sample], epochs: int = 40, seed: int = 0,
                 subset: int | None = None, train_cfg: TrainConfig | None = None):
        if subset is not None and subset < len(samples):
            pick = np.sort(np.random.default_rng(seed).choice(len(samples), subset, replace=False))
            samples = [samples[i] for i in pick]
        plan = make_folds(samples, 5, seed=seed)
        self.train_set, self.val_set = plan.split(samples, 0)
        base = train_cfg or TrainConfig(seed=seed)
        self.cfg = base.with_epochs(epochs) if base.epochs else replace(base, epochs=epochs)
        self.seed = seed

    def __call__(self, spec: ArchSpec, parent: ModelState | None = None):
        state = (inherit_params(spec, parent, self.seed) if parent is not None
                 else init_state(spec, self.seed))
        state, _ = train(spec, self.train_set, None, self.cfg, state=state)
        return evaluate(state, self.val_set)[0], state


@dataclass
class ExploreResult:
    best: CandidateRecord | None
    archive: list[CandidateRecord]
    log: list[CandidateRecord]
    best_u_trace: list[float | None]
    infeasible_best: CandidateRecord | None = None

    @property
    def feasible(self) -> bool:
        return self.best is not None


def make_record(spec: ArchSpec, accuracy: float, constraints: Constraints,
                coeffs=(2.0, 0.5, 0.5), iteration: int = 0) -> CandidateRecord:
    stats = count_params(spec)
    u = u_score(accuracy, stats.param_count, stats.mac_count, *coeffs) if accuracy > 0 else None
    rec = CandidateRecord(spec, float(accuracy), stats.param_count, stats.mac_count, u, False, iteration)
    rec.feasible = bool(indicator(rec, constraints))
    return rec


def _u_key(rec: CandidateRecord) -> float:
    return -math.inf if rec.u_score is None else rec.u_score


def explore(seed_spec: ArchSpec, dataset: Sequence[Sample] | None, constraints: Constraints,
            cfg: SearchConfig, evaluate_fn: Callable | None = None,
            log_path=None) -> ExploreResult:
    """Mutate-evaluate-filter search from ``seed_spec``.

    ``evaluate_fn(spec, parent_state)`` returns ``(accuracy, state)``; by
    default a :class:`ProxyEvaluator` over ``dataset``. Each iteration
    proposes ``cfg.population`` structurally new candidates from parents drawn
    from the archive (tournament on U) or, with equal odds, from everything
    evaluated so far.
    """
    validate_and_toposort(seed_spec)
    infer_shapes(seed_spec)
    if evaluate_fn is None:
        evaluate_fn = ProxyEvaluator(dataset, cfg.proxy_epochs, cfg.seed, cfg.proxy_subset)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE5]))
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    seen: dict[str, CandidateRecord] = {}
    states: dict[str, ModelState] = {}
    evaluated: list[CandidateRecord] = []
    archive: list[CandidateRecord] = []
    trace: list[float | None] = []

    def run(spec, iteration, parent_key=None):
        parent = states.get(parent_key) if cfg.warm_start and parent_key else None
        acc, state = evaluate_fn(spec, parent)
        rec = make_record(spec, acc, constraints, cfg.coeffs, iteration)
        key = structure_key(spec)
        seen[key] = rec
        if cfg.warm_start:
            states[key] = state
        evaluated.append(rec)
        if rec.feasible:
            if not indicator(rec, constraints):
                raise AssertionError("infeasible record admitted to archive")
            archive.append(rec)
        if log_fh:
            log_fh.write(rec.to_json() + "\n")
            log_fh.flush()
        logger.info("iter %d acc=%.4f params=%d U=%s feasible=%s", iteration, rec.accuracy,
                    rec.params, rec.u_score, rec.feasible)

    def best_u():
        return max((_u_key(r) for r in archive), default=None)

    try:
        run(seed_spec, 0)
        trace.append(best_u())
        for it in range(1, cfg.iterations + 1):
            made = 0
            for _ in range(cfg.population):
                child = parent_key = None
                for _attempt in range(cfg.max_attempts):
                    if archive and rng.random() < 0.5:
                        picks = rng.integers(len(archive), size=2)
                        parent = max((archive[i] for i in picks), key=_u_key)
                    else:
                        parent = evaluated[rng.integers(len(evaluated))]
                    cand = mutate(parent.spec, rng, cfg.rates, cfg.width_choices)
                    if structure_key(cand) not in seen:
                        child, parent_key = cand, structure_key(parent.spec)
                        break
                if child is None:
                    break
                run(child, it, parent_key)
                made += 1
            trace.append(best_u())
            if made == 0:
                logger.info("no unseen candidates left after iteration %d", it)
                break
    finally:
        if log_fh:
            log_fh.close()

    for rec in archive:
        if not indicator(rec, constraints):
            raise AssertionError("archive member violates the constraints")
    best = max(archive, key=_u_key) if archive else None
    infeasible_best = None
    if best is None and evaluated:
        infeasible_best = max(evaluated, key=lambda r: (r.accuracy, _u_key(r)))
    return ExploreResult(best, archive, evaluated, trace, infeasible_best)


def load_log(path) -> list[CandidateRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CandidateRecord.from_json(line) for line in fh if line.strip()]


def rerank(records: Sequence[CandidateRecord], constraints: Constraints,
           coeffs=(2.0, 0.5, 0.5)) -> list[CandidateRecord]:
    """Re-score logged candidates under new coefficients/constraints, best first."""
    out = [make_record(r.spec, r.accuracy, constraints, coeffs, r.iteration) for r in records]
    feasible = [r for r in out if r.feasible]
    return sorted(feasible, key=_u_key, reverse=True)
