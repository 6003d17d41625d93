"""
Self Check Service - invariant suite over every kernel and model component
Each check resolves the kernels through their modules at call time, so a
perturbed kernel is reported by name.
"""

import logging
import traceback
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from geowalk.core.errors import InvalidSpecError
from geowalk.core.run_config import BackboneConfig, PromptConfig
from geowalk.services import backbone as bb
from geowalk.services import geo_moe as moe
from geowalk.services import graph as gr
from geowalk.services import manifold as mf
from geowalk.services import metrics as mt
from geowalk.services import prompt_encoder as pe
from geowalk.services import training as tr
from geowalk.services.gradcheck import check_gradients

logger = logging.getLogger(__name__)

CHECKS: "OrderedDict[str, Callable[[], Tuple[bool, str]]]" = OrderedDict()

SAMPLES = 10_000
ROUND_TRIP_TOL = 1e-6
CLOSURE_TOL = 1e-9
METRIC_TOL = 1e-9
FLAT_LIMIT_TOL = 1e-3
SIMPLEX_TOL = 1e-9
ORACLE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn

    return register


def _specs() -> Dict[str, mf.ManifoldSpec]:
    return {
        "euclidean": mf.ManifoldSpec.euclidean(),
        "hyperbolic": mf.ManifoldSpec.hyperbolic(-1.0),
        "spherical": mf.ManifoldSpec.spherical(1.0),
    }


def _random_points(spec: mf.ManifoldSpec, count: int, dim: int, scale: float = 1.0) -> torch.Tensor:
    h = torch.randn(count, dim, dtype=torch.float64) * scale
    return mf.expmap0_chart(h, spec)


def _random_tangent(p: mf.Point, max_norm: float) -> mf.Tangent:
    w = torch.randn_like(p.coords)
    v = mf.project_to_tangent(p, w)
    norm = mf.tangent_norm(v).unsqueeze(-1).clamp_min(1e-12)
    radius = torch.rand(p.coords.shape[0], 1, dtype=torch.float64) * max_norm
    return mf.Tangent(p, v.vec / norm * radius)


def _max_radius(spec: mf.ManifoldSpec) -> float:
    # stays below the cut locus on the sphere
    return 2.5 / np.sqrt(spec.curvature) if spec.kind is mf.ManifoldKind.SPHERICAL else 2.0


def _passed(worst: float, tol: float, what: str) -> Tuple[bool, str]:
    return worst <= tol, f"{what} {worst:.3e} (tolerance {tol:.0e})"


# MANIFOLD KERNELS #############################################################


@check("spec_validation")
def _spec_validation():
    bad = [("hyperbolic", 1.0), ("spherical", -1.0), ("euclidean", 0.5), ("hyperbolic", 0.0)]
    accepted = []
    for kind, c in bad:
        try:
            mf.ManifoldSpec(kind, c)
            accepted.append(f"{kind}({c})")
        except InvalidSpecError:
            pass
    return not accepted, f"accepted invalid specs: {accepted}" if accepted else "all invalid specs rejected"


@check("lorentz_inner_example")
def _lorentz_inner_example():
    value = float(mf.lorentz_inner([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]))
    return value == 24.0, f"<(1,2,3),(4,5,6)>_L = {value}, expected 24"


def _round_trip(kind: str):
    spec = _specs()[kind]
    p = mf.Point(_random_points(spec, SAMPLES, 4), spec)
    v = _random_tangent(p, _max_radius(spec))
    back = mf.log_map(p, mf.exp_map(p, v))
    worst = float((back.vec - v.vec).abs().max())
    return _passed(worst, ROUND_TRIP_TOL, "max |log(exp(v)) - v|")


def _closure(kind: str):
    spec = _specs()[kind]
    p = mf.Point(_random_points(spec, SAMPLES, 4), spec)
    v = _random_tangent(p, _max_radius(spec))
    worst = float(mf.check_point(mf.exp_map(p, v).coords, spec))
    return _passed(worst, CLOSURE_TOL, "max on-manifold residual")


def _metric_axioms(kind: str):
    spec = _specs()[kind]
    x, y, z = (mf.Point(_random_points(spec, SAMPLES, 3), spec) for _ in range(3))
    d_xx = mf.geodesic_distance(x, x).abs().max()
    d_xy = mf.geodesic_distance(x, y)
    d_yx = mf.geodesic_distance(y, x)
    d_xz = mf.geodesic_distance(x, z)
    d_zy = mf.geodesic_distance(z, y)
    worst = max(
        float(d_xx),
        float((d_xy - d_yx).abs().max()),
        float((d_xy - d_xz - d_zy).clamp_min(0).max()),
        float((-d_xy).clamp_min(0).max()),
    )
    return _passed(worst, METRIC_TOL, "worst metric-axiom violation")


for _kind in ("euclidean", "hyperbolic", "spherical"):
    check(f"exp_log_round_trip_{_kind}")(lambda k=_kind: _round_trip(k))
    check(f"exp_closure_{_kind}")(lambda k=_kind: _closure(k))
    check(f"metric_axioms_{_kind}")(lambda k=_kind: _metric_axioms(k))


@check("flat_limit")
def _flat_limit():
    h = torch.randn(SAMPLES, 3, dtype=torch.float64) * 0.5
    g = torch.randn(SAMPLES, 3, dtype=torch.float64) * 0.5
    flat = torch.linalg.vector_norm(h - g, dim=-1)
    worst = 0.0
    for spec in (mf.ManifoldSpec.hyperbolic(-1e-4), mf.ManifoldSpec.spherical(1e-4)):
        x = mf.Point(mf.expmap0_chart(h, spec), spec)
        y = mf.Point(mf.expmap0_chart(g, spec), spec)
        worst = max(worst, float((mf.geodesic_distance(x, y) - flat).abs().max()))
    return _passed(worst, FLAT_LIMIT_TOL, "max |d_c - d_flat| at |c|=1e-4")


@check("poincare_round_trip")
def _poincare_round_trip():
    v = torch.randn(SAMPLES, 4, dtype=torch.float64)
    v = v / torch.linalg.vector_norm(v, dim=-1, keepdim=True) * torch.rand(SAMPLES, 1, dtype=torch.float64) * 3.0
    y = mf.poincare_exp0(v, -1.0)
    inside = float(torch.linalg.vector_norm(y, dim=-1).max()) < 1.0
    worst = float((mf.poincare_log0(y, -1.0) - v).abs().max())
    ok, detail = _passed(worst, ROUND_TRIP_TOL, "max |log0(exp0(v)) - v|")
    return ok and inside, detail + ("" if inside else "; exp0 left the ball")


@check("mobius_identity")
def _mobius_identity():
    x = mf.poincare_exp0(torch.randn(SAMPLES, 4, dtype=torch.float64), -1.0)
    zero = torch.zeros_like(x)
    worst = max(
        float((mf.mobius_add(zero, x, -1.0) - x).abs().max()),
        float((mf.mobius_add(x, zero, -1.0) - x).abs().max()),
        float((mf.mobius_matvec(torch.eye(4, dtype=torch.float64), x, -1.0) - x).abs().max()),
    )
    return _passed(worst, ROUND_TRIP_TOL, "max Mobius identity error")


# GRAPHS #######################################################################


def _naive_knn(coords: torch.Tensor, spec: mf.ManifoldSpec, k: int) -> List[List[int]]:
    m = mf.get_manifold(spec)
    rows = []
    for i in range(coords.shape[0]):
        d = m.dist(coords[i].unsqueeze(0), coords).tolist()
        order = sorted((d[j], j) for j in range(len(d)) if j != i)
        rows.append([j for _, j in order[:k]])
    return rows


@check("knn_brute_force_oracle")
def _knn_brute_force_oracle():
    mismatches = []
    for kind, spec in _specs().items():
        coords = _random_points(spec, 80, 3, 0.8)
        graph = gr.knn_graph(coords, spec, 5)
        expected = _naive_knn(coords, spec, 5)
        if [[j for j, _ in graph.neighbors(i)] for i in range(graph.n)] != expected:
            mismatches.append(kind)
    return not mismatches, f"mismatch in {mismatches}" if mismatches else "brute force matches the naive oracle"


@check("knn_tree_oracle")
def _knn_tree_oracle():
    mismatches = []
    for kind, spec in _specs().items():
        coords = _random_points(spec, 150, 3, 0.8)
        brute = gr.knn_graph(coords, spec, 6)
        tree = gr.knn_graph(coords, spec, 6, brute_force_limit=1)
        if not np.array_equal(brute.indices, tree.indices):
            mismatches.append(kind)
    return not mismatches, f"mismatch in {mismatches}" if mismatches else "tree search matches brute force"


@check("graph_format_round_trip")
def _graph_format_round_trip():
    spec = _specs()["hyperbolic"]
    graph = gr.knn_graph(_random_points(spec, 30, 3), spec, 4)
    parsed = gr.parse_graph(gr.format_graph(graph))
    return parsed == graph, "parsed graph equals the original" if parsed == graph else "graph changed in round trip"


# PROMPT ENCODER ###############################################################


def _toy_graph(spec: mf.ManifoldSpec, n: int = 10, k: int = 3) -> gr.RelationalGraph:
    return gr.knn_graph(_random_points(spec, n, 3), spec, k)


@check("sage_aggregate_oracle")
def _sage_aggregate_oracle():
    graph = _toy_graph(_specs()["euclidean"], 12, 3)
    x = torch.randn(12, 5, dtype=torch.float64)
    agg = pe.sage_aggregate(x, graph)
    expected = torch.stack([x[[j for j, _ in graph.neighbors(i)]].mean(dim=0) for i in range(graph.n)])
    return _passed(float((agg - expected).abs().max()), ORACLE_TOL, "max aggregate error")


@check("sage_layer_closure")
def _sage_layer_closure():
    worst = 0.0
    for kind in ("hyperbolic", "spherical"):
        spec = _specs()[kind]
        graph = _toy_graph(spec, 15, 4)
        layer = pe.SageLayer(6, 5).double()
        out = pe.riemannian_sage_layer(
            layer, torch.randn(15, 6, dtype=torch.float64), graph, mf.ManifoldSpec.euclidean(), spec
        )
        worst = max(worst, float(mf.check_point(out, spec)))
    return _passed(worst, 1e-7, "max on-manifold residual after a SAGE layer")


@check("encoder_permutation_equivariance")
def _encoder_permutation_equivariance():
    spec = _specs()["hyperbolic"]
    graph = _toy_graph(spec, 12, 3)
    encoder = pe.GeometryEncoder(spec, 5, 4, 3).double()
    x = torch.randn(12, 5, dtype=torch.float64)
    perm = np.random.default_rng(0).permutation(12)
    base = pe.encode(encoder, x, graph).matrix
    permuted = pe.encode(encoder, x[torch.from_numpy(perm)], gr.subgraph_permuted(graph, perm)).matrix
    worst = float((permuted - base[torch.from_numpy(perm)]).abs().max())
    return _passed(worst, ORACLE_TOL, "max permuted-output difference")


@check("encoder_gradients")
def _encoder_gradients():
    spec = _specs()["hyperbolic"]
    graph = _toy_graph(spec, 10, 3)
    encoder = pe.GeometryEncoder(spec, 4, 3, 2).double()
    readout = torch.nn.Linear(2, 1).double()
    x = torch.randn(10, 4, dtype=torch.float64)
    y = torch.randn(10, dtype=torch.float64)

    def loss():
        return torch.mean((readout(encoder(x, graph)).squeeze(-1) - y) ** 2)

    params = list(encoder.named_parameters()) + [(f"readout.{n}", p) for n, p in readout.named_parameters()]
    result = check_gradients(loss, params)
    name, worst = result.worst
    return result.passed, f"worst relative error {worst:.3e} in {name}"


# GEOMETRY ADAPTER #############################################################


@check("gate_simplex")
def _gate_simplex():
    w_g = torch.randn(3, 8, dtype=torch.float64) * 5
    x = torch.randn(100_000, 8, dtype=torch.float64)
    weights = moe.gate(w_g, x, 0.1)
    worst = max(
        float((weights.sum(dim=-1) - 1).abs().max()),
        float((-weights).clamp_min(0).max()),
        float((weights - 1).clamp_min(0).max()),
    )
    return _passed(worst, SIMPLEX_TOL, "max simplex violation")


@check("gate_temperature_monotone")
def _gate_temperature_monotone():
    w_g = torch.tensor([[1.0, 0.0], [0.5, 0.0], [0.0, 0.2]], dtype=torch.float64)
    x = torch.tensor([1.0, 1.0], dtype=torch.float64)
    maxima = [float(moe.gate(w_g, x, tau).max()) for tau in (2.0, 1.0, 0.5, 0.1)]
    ok = all(b > a for a, b in zip(maxima, maxima[1:]))
    return ok, f"max gate weight by decreasing temperature: {[round(m, 6) for m in maxima]}"


def _toy_adapter(dim: int = 6, hidden: int = 5) -> moe.AdapterBlock:
    return moe.AdapterBlock(dim, hidden).double()


@check("adapter_one_hot_collapse")
def _adapter_one_hot_collapse():
    block = _toy_adapter()
    x = torch.randn(20, 6, dtype=torch.float64)
    with torch.no_grad():
        block.gate.w_g.zero_()
        block.gate.w_g[0, 0] = 1e6
    x[:, 0] = x[:, 0].abs() + 0.1
    worst = float((moe.adapter_forward(block, x) - block.experts[0](x)).abs().max())
    return _passed(worst, SIMPLEX_TOL, "max |mixture - euclidean expert|")


@check("adapter_convexity")
def _adapter_convexity():
    block = _toy_adapter()
    with torch.no_grad():
        block.gate.w_g.normal_()
    x = torch.randn(200, 6, dtype=torch.float64)
    y = moe.adapter_forward(block, x)
    outputs = torch.stack([expert(x) for expert in block.experts])
    low = (outputs.min(dim=0).values - y).clamp_min(0).max()
    high = (y - outputs.max(dim=0).values).clamp_min(0).max()
    return _passed(max(float(low), float(high)) - 1e-12, 0.0, "max convexity violation beyond 1e-12")


@check("spherical_expert_norm")
def _spherical_expert_norm():
    expert = moe.SphericalExpert(6, 5, kappa=2.5).double()
    out = expert(torch.randn(SAMPLES, 6, dtype=torch.float64))
    worst = float((torch.linalg.vector_norm(out, dim=-1) - expert.kappa).abs().max())
    return _passed(worst, CLOSURE_TOL, "max |norm - kappa|")


@check("hyperbolic_expert_in_ball")
def _hyperbolic_expert_in_ball():
    expert = moe.HyperbolicExpert(6, 5, curvature=-2.0).double()
    out = expert(torch.randn(SAMPLES, 6, dtype=torch.float64) * 10)
    scaled = float((torch.linalg.vector_norm(out, dim=-1) * (-expert.c).sqrt()).max())
    return scaled < 1.0, f"max sqrt|c| * norm = {scaled:.12f}"


@check("adapter_gradients")
def _adapter_gradients():
    block = moe.AdapterBlock(4, 3).double()
    with torch.no_grad():
        block.gate.w_g.normal_(std=0.5)
        for expert in block.experts:
            expert.w1.mul_(0.5)
    x = torch.randn(5, 4, dtype=torch.float64) * 0.3
    target = torch.randn(5, 4, dtype=torch.float64)

    def loss():
        return ((moe.adapter_forward(block, x) - target) ** 2).sum()

    result = check_gradients(loss, block.named_parameters())
    name, worst = result.worst
    return result.passed, f"worst relative error {worst:.3e} in {name}"


@check("expert_contributions_mean")
def _expert_contributions_mean():
    rng = np.random.default_rng(0)
    weights = rng.dirichlet(np.ones(3), size=2000)
    trace = moe.GateTrace()
    trace.append("regression", np.arange(2000) % 5, weights)
    means = moe.expert_contributions(trace).loc["regression"].to_numpy()
    worst = float(np.abs(means - weights.mean(axis=0)).max())
    ok, detail = _passed(worst, ORACLE_TOL, "max mean error")
    return ok and abs(means.sum() - 1) < 1e-6, detail


# HOST MODEL ###################################################################


def _toy_host() -> Tuple[bb.HostModel, Dict[str, torch.Tensor]]:
    config = BackboneConfig(layers=2, model_dim=16, heads=2, adapter_period=1, ffn_dim=8, vocabulary=3)
    dims = {m: 3 for m in bb.MODALITIES}
    model = bb.HostModel(config, dims).double()
    with torch.no_grad():
        for adapter in model.adapters():
            for expert in adapter.experts:
                expert.w1.mul_(0.1)
    inputs = {m: torch.randn(4, 3, dtype=torch.float64) for m in bb.MODALITIES}
    return model, inputs


@check("smooth_l1_examples")
def _smooth_l1_examples():
    values = [float(tr.smooth_l1(p, t, 1.0)) for p, t in ((2.0, 2.0), (0.5, 0.0), (3.0, 0.0))]
    ok = values == [0.0, 0.125, 2.5]
    return ok, f"smooth_l1 values {values}, expected [0.0, 0.125, 2.5]"


@check("combined_loss_affine")
def _combined_loss_affine():
    logits = torch.randn(6, 3, dtype=torch.float64)
    classes = torch.tensor([0, 1, 2, 0, 1, 2])
    pred, target = torch.randn(6, dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    a = float(tr.combined_loss(logits, classes, pred, target, 0.0))
    b = float(tr.combined_loss(logits, classes, pred, target, 1.0)) - a
    worst = abs(float(tr.combined_loss(logits, classes, pred, target, 2.0)) - (a + 2 * b))
    return _passed(worst, ORACLE_TOL, "affine-in-lambda violation")


@check("host_adapter_placement")
def _host_adapter_placement():
    layers = BackboneConfig(layers=8, model_dim=16, heads=2, adapter_period=4).adapter_layers()
    return layers == [4, 8], f"adapters at blocks {layers}, expected [4, 8]"


@check("host_batch_permutation")
def _host_batch_permutation():
    model, inputs = _toy_host()
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        base = model(inputs, "regression").numeric
        permuted = model({m: x[perm] for m, x in inputs.items()}, "regression").numeric
    return _passed(float((permuted - base[perm]).abs().max()), ORACLE_TOL, "max permuted-output difference")


@check("host_gradients")
def _host_gradients():
    model, inputs = _toy_host()
    model.train()
    bb.freeze_backbone(model)
    classes = torch.tensor([0, 1, 2, 1])
    numeric = torch.randn(4, dtype=torch.float64)

    def loss():
        reg = model(inputs, "regression")
        cls = model(inputs, "classification")
        return tr.combined_loss(cls.logits, classes, reg.numeric, numeric, 1.0)

    result = check_gradients(loss, [(n, p) for n, p in model.named_parameters() if p.requires_grad])
    name, worst = result.worst
    return result.passed, f"worst relative error {worst:.3e} in {name}"


# METRICS ######################################################################


def _r2_reference(preds, targets):
    mean = sum(targets) / len(targets)
    ss_res = sum((t - p) ** 2 for p, t in zip(preds, targets))
    ss_tot = sum((t - mean) ** 2 for t in targets)
    return 1 - ss_res / ss_tot


def _f1_reference(preds, targets, classes):
    scores = []
    for c in classes:
        tp = sum(1 for p, t in zip(preds, targets) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, targets) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, targets) if p != c and t == c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


@check("r2_oracle")
def _r2_oracle():
    rng = np.random.default_rng(1)
    worst = abs(mt.r2_score([0, 0, 0], [0, 1, 2]) - (-1.5))
    for _ in range(1000):
        targets = rng.normal(size=20)
        preds = targets + rng.normal(scale=0.5, size=20)
        worst = max(worst, abs(mt.r2_score(preds, targets) - _r2_reference(preds.tolist(), targets.tolist())))
    return _passed(worst, ORACLE_TOL, "max R2 deviation")


@check("f1_oracle")
def _f1_oracle():
    rng = np.random.default_rng(2)
    worst = abs(mt.f1_score([1, 1, 1, 1], [1, 1, 0, 0], [0, 1]) - 1 / 3)
    for _ in range(1000):
        targets = rng.integers(0, 4, size=30)
        preds = np.where(rng.random(30) < 0.7, targets, rng.integers(0, 4, size=30))
        classes = [0, 1, 2, 3]
        worst = max(
            worst, abs(mt.f1_score(preds, targets, classes) - _f1_reference(preds.tolist(), targets.tolist(), classes))
        )
    return _passed(worst, ORACLE_TOL, "max macro-F1 deviation")


# RUNNER #######################################################################


def run_checks(names: Optional[Sequence[str]] = None, seed: int = 0) -> List[CheckResult]:
    selected = list(CHECKS) if not names else list(names)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}")

    results = []
    for name in selected:
        torch.manual_seed(seed)
        try:
            passed, detail = CHECKS[name]()
        except Exception as e:
            logger.debug(traceback.format_exc())
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail))
        logger.info(f"check {name}: {'ok' if passed else 'FAILED'} ({detail})")
    return results


def results_payload(results: List[CheckResult]) -> Dict:
    return {
        "check_count": len(results),
        "passed": sum(r.passed for r in results),
        "failed": [r.name for r in results if not r.passed],
        "results": [asdict(r) for r in results],
    }
