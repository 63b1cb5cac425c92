"""
Moteur de gradients en mode inverse

Une bande (Tape) enregistre, dans l'ordre d'exécution, chaque opération du
vocabulaire fixe du pipeline avec son adjoint. backward() parcourt la bande à
l'envers et accumule les gradients dans les feuilles.

Contient aussi l'optimiseur Adam et la batterie de vérification des gradients
par différences finies centrées.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from extractors.edge_render import (
    EdgeConfig,
    EdgeWeights,
    aggregate_edge_values,
    aggregate_edges_vjp,
    render_edge,
    render_edge_vjp,
    segment_sq_distance,
    segment_sq_distance_vjp,
)
from extractors.voxel_aggregation import (
    SamplingPlan,
    build_grid,
    build_sampling_plan,
    heatmap_from_logits,
    heatmap_from_logits_vjp,
    softmax_aggregate_values,
    softmax_aggregate_vjp,
    spatial_softmax_values,
    spatial_softmax_vjp,
    unproject_values,
    unproject_vjp,
    volume_affine_values,
    volume_affine_vjp,
)
from losses import (
    FeatureTransform,
    IdentityFeatures,
    LengthState,
    combine_edge_prediction,
    combine_edge_prediction_vjp,
    edge_lengths,
    length_loss,
    length_loss_vjp,
    recon_loss_vjp,
    separation_loss,
    separation_loss_vjp,
)
from utils.errors import NonFiniteError, ValidationError
from utils.geometry import CameraModel, look_at_camera, project_points, project_points_vjp
from utils.normalize import Normalize

logger = logging.getLogger(__name__)


# =========================================================
# Bande
# =========================================================
class Var:
    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value, name: str = "", requires_grad: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var({self.name or '?'}, shape={self.value.shape})"


@dataclass
class _Record:
    op: str
    out: Var
    inputs: List[Var]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self.records: List[_Record] = []

    # -------------------------
    # Nœuds
    # -------------------------
    @staticmethod
    def leaf(value, name: str = "") -> Var:
        return Var(value, name=name, requires_grad=True)

    @staticmethod
    def constant(value, name: str = "") -> Var:
        return Var(value, name=name, requires_grad=False)

    def record(self, op: str, value, inputs: Sequence[Var], backward) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        requires = any(v.requires_grad for v in inputs)
        out = Var(value, name=op, requires_grad=requires)
        if requires:
            self.records.append(_Record(op, out, list(inputs), backward))
        return out

    def extend(self, other: "Tape") -> None:
        """Ajoute les enregistrements d'une sous-bande (calculée par vue) dans l'ordre."""
        self.records.extend(other.records)

    def backward(self, root: Var, seed: Optional[np.ndarray] = None) -> None:
        root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for rec in reversed(self.records):
            if rec.out.grad is None:
                continue
            grads = rec.backward(rec.out.grad)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = inp.grad + g

    # -------------------------
    # Vocabulaire d'opérations
    # -------------------------
    def softmax2d(self, logits: Var) -> Var:
        hm = heatmap_from_logits(logits.value)
        return self.record("softmax2d", hm, [logits], lambda g: [heatmap_from_logits_vjp(hm, g)])

    def unproject(self, plan: SamplingPlan, heatmap: Var) -> Var:
        value = unproject_values(plan, heatmap.value)
        return self.record("unproject", value, [heatmap], lambda g: [unproject_vjp(plan, g)])

    def aggregate(self, volumes: Sequence[Var]) -> Var:
        shape = volumes[0].shape
        for i, vol in enumerate(volumes):
            if vol.shape != shape:
                raise ValidationError("aggregate_shapes", f"volume {i}: {vol.shape} != {shape}")
        stack = np.stack([v.value for v in volumes], axis=0)
        out, weights = softmax_aggregate_values(stack)

        def backward(g):
            gs = softmax_aggregate_vjp(stack, out, weights, g)
            return [gs[i] for i in range(len(volumes))]

        return self.record("aggregate", out, volumes, backward)

    def affine(self, flat: Var, scale: Var, bias: Var) -> Var:
        value = volume_affine_values(flat.value, scale.value, bias.value)
        return self.record("affine", value, [flat, scale, bias],
                           lambda g: list(volume_affine_vjp(flat.value, scale.value, g)))

    def spatial_softmax(self, flat: Var, coords: np.ndarray, tau: float = 1.0) -> Var:
        points, probs = spatial_softmax_values(flat.value, coords, tau)
        return self.record("spatial_softmax", points, [flat],
                           lambda g: [spatial_softmax_vjp(probs, coords, points, g, tau)])

    def project(self, points: Var, cam: CameraModel) -> Var:
        """Points monde J×3 -> coordonnées image normalisées J×2."""
        P = cam.P
        uv, w = project_points(P, points.value)
        size = np.array([cam.width, cam.height], dtype=np.float64)
        value = Normalize.pixel_to_normalized(uv, cam.width, cam.height)
        return self.record("project", value, [points],
                           lambda g: [project_points_vjp(P, uv, w, g / size)])

    def normalize_volume(self, points: Var, lower: np.ndarray, side_length: float) -> Var:
        value = (points.value - lower) / side_length
        return self.record("normalize_volume", value, [points], lambda g: [g / side_length])

    def edges(self, kps2d: Var, weights: Var, cfg: EdgeConfig) -> Var:
        ew = EdgeWeights(kps2d.shape[0], values=weights.value)
        value, cache = aggregate_edge_values(kps2d.value, ew, cfg)
        return self.record("edges", value, [kps2d, weights],
                           lambda g: list(aggregate_edges_vjp(cache, g, ew.pairs)))

    def combine(self, e_t: Var, e_tk: Var) -> Var:
        value = combine_edge_prediction(e_t.value, e_tk.value)
        return self.record("combine", value, [e_t, e_tk],
                           lambda g: list(combine_edge_prediction_vjp(e_t.value, e_tk.value, g)))

    def mse(self, pred: Var, target: np.ndarray, feature_transform: Optional[FeatureTransform] = None) -> Var:
        phi = feature_transform or IdentityFeatures()
        target = np.asarray(getattr(target, "values", target), dtype=np.float64)
        if pred.shape != target.shape:
            raise ValidationError("recon_shapes", f"{pred.shape} != {target.shape}")
        diff = phi(pred.value) - phi(target)
        value = np.mean(diff * diff)
        return self.record("mse", value, [pred],
                           lambda g: recon_loss_vjp([pred.value], [target], phi, g))

    def length(self, points: Var, weights: EdgeWeights, state: LengthState) -> Var:
        value = length_loss(points.value, weights, state)
        return self.record("length", value, [points],
                           lambda g: [length_loss_vjp(points.value, weights, state, float(g))])

    def separation(self, normalized: Var, sigma_s: float) -> Var:
        value = separation_loss(normalized.value, sigma_s)
        return self.record("separation", value, [normalized],
                           lambda g: [separation_loss_vjp(normalized.value, sigma_s, float(g))])

    def weighted_sum(self, terms: Sequence[Var], coeffs: Sequence[float]) -> Var:
        value = sum(float(c) * t.value for c, t in zip(coeffs, terms))
        return self.record("weighted_sum", value, terms,
                           lambda g: [float(c) * g for c in coeffs])

    def inner(self, y: Var, c: np.ndarray) -> Var:
        c = np.asarray(c, dtype=np.float64)
        return self.record("inner", np.sum(y.value * c), [y], lambda g: [g * c])


# =========================================================
# Adam
# =========================================================
class Adam:
    """
    Adam par paramètre nommé. Le compteur de pas est propre à chaque paramètre :
    les tables de logits ne reçoivent un gradient que lorsque leur image est tirée.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr_multipliers: Optional[Dict[str, float]] = None) -> None:
        """Mise à jour en place, dans l'ordre trié des noms."""
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if g.shape != p.shape:
                raise ValidationError("adam_shapes", f"{name}: {g.shape} != {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            step = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** step)
            v_hat = v / (1.0 - self.beta2 ** step)
            lr = self.lr * (lr_multipliers or {}).get(name, 1.0)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in self.m:
            state[f"adam_m/{name}"] = self.m[name]
            state[f"adam_v/{name}"] = self.v[name]
            state[f"adam_t/{name}"] = np.array(self.t[name], dtype=np.int64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                self.m[name] = np.array(value, dtype=np.float64)
            elif kind == "adam_v":
                self.v[name] = np.array(value, dtype=np.float64)
            elif kind == "adam_t":
                self.t[name] = int(value)


# =========================================================
# Vérification des gradients
# =========================================================
@dataclass
class GradcheckResult:
    op: str
    samples: int
    max_rel_error: float
    passed: bool
    seconds: float


def _directional_check(fn: Callable[[Tape, Var], Var], x0: np.ndarray, scale: float,
                       rng: np.random.Generator, out_shape=None) -> float:
    """
    Compare ⟨∇f, d⟩ analytique et (f(x+hd) − f(x−hd))/2h pour une direction
    aléatoire unitaire d et un cotangent aléatoire c. Erreur rapportée à ‖∇f‖.
    """
    tape = Tape()
    x = tape.leaf(x0)
    y = fn(tape, x)
    c = rng.standard_normal(y.shape)
    root = tape.inner(y, c)
    tape.backward(root)
    grad = x.grad if x.grad is not None else np.zeros_like(x0)

    d = rng.standard_normal(x0.shape)
    d /= np.linalg.norm(d)
    h = 1e-3 * scale

    def f(v):
        return float(np.sum(fn(Tape(check_finite=False), Tape.leaf(v)).value * c))

    numeric = (f(x0 + h * d) - f(x0 - h * d)) / (2.0 * h)
    analytic = float(np.sum(grad * d))
    norm = float(np.linalg.norm(grad))
    if norm < 1e-12:
        return 0.0 if abs(numeric) < 1e-9 else float("inf")
    return abs(analytic - numeric) / norm


def _check_camera() -> CameraModel:
    return look_at_camera("gc", position=(2500.0, -1500.0, 800.0), target=(0.0, 0.0, 0.0),
                          focal=60.0, width=48, height=40)


def _gradcheck_cases(rng: np.random.Generator) -> Dict[str, Callable[[], tuple]]:
    """Chaque cas renvoie (fn(tape, x) -> Var, x0, échelle)."""
    grid = build_grid((0.0, 0.0, 0.0), 2000.0, 6)
    cam = _check_camera()
    plan = build_sampling_plan(grid, cam, (10, 12))
    cam2 = look_at_camera("gc2", position=(-1800.0, 2600.0, 1200.0), target=(0.0, 0.0, 0.0),
                          focal=60.0, width=48, height=40)
    plan2 = build_sampling_plan(grid, cam2, (10, 12))
    edge_cfg_single = EdgeConfig(sigma=0.1, height=16, width=16)
    edge_cfg_max = EdgeConfig(sigma=0.05, height=32, width=32)
    sparse_weights = EdgeWeights(4, values=[0.8, -0.5, -0.5, -0.5, -0.5, 0.6])

    def softmax2d():
        return (lambda t, x: t.softmax2d(x)), rng.standard_normal((6, 5, 3)), 1.0

    def unproject():
        return (lambda t, x: t.unproject(plan, x)), rng.random((10, 12, 2)), 1.0

    def aggregate():
        M = 3

        def fn(t, x):
            return t.aggregate([t.record("split", x.value[i], [x], _split_vjp(x.shape, i)) for i in range(M)])
        return fn, rng.standard_normal((M, 40, 2)), 1.0

    def affine():
        flat = rng.standard_normal((30, 3))
        bias = rng.standard_normal(3)

        def fn(t, x):
            return t.affine(t.constant(flat), x, t.constant(bias))
        return fn, 1.0 + rng.random(3), 1.0

    def spatial_softmax():
        coords = grid.flat_coords
        return (lambda t, x: t.spatial_softmax(x, coords, tau=1.0)), rng.standard_normal((grid.n_voxels, 2)), 1.0

    def project():
        return (lambda t, x: t.project(x, cam)), rng.normal(0.0, 300.0, (5, 3)), 100.0

    def segment_distance():
        p = edge_cfg_single.pixel_centers()

        def fn(t, x):
            a, b = x.value[0], x.value[1]
            value = segment_sq_distance(p, a, b)

            def backward(g):
                ga, gb = segment_sq_distance_vjp(p, a, b, g)
                return [np.stack([ga, gb])]
            return t.record("segment_distance", value, [x], backward)
        return fn, _random_segment(rng), 1.0

    def edge_gaussian():
        p = edge_cfg_single.pixel_centers()
        sigma = edge_cfg_single.sigma

        def fn(t, x):
            value = render_edge(x.value[0], x.value[1], edge_cfg_single).values

            def backward(g):
                ga, gb = render_edge_vjp(p, x.value[0], x.value[1], g, sigma)
                return [np.stack([ga, gb])]
            return t.record("edge_gaussian", value, [x], backward)
        return fn, _random_segment(rng), 1.0

    def max_aggregation():
        base = np.array([[0.15, 0.20], [0.35, 0.15], [0.70, 0.80], [0.85, 0.65]])
        kps = base + rng.uniform(-0.04, 0.04, base.shape)

        def fn(t, x):
            return t.edges(x, t.constant(sparse_weights.values), edge_cfg_max)
        return fn, kps, 1.0

    def edge_weights():
        base = np.array([[0.15, 0.20], [0.35, 0.15], [0.70, 0.80], [0.85, 0.65]])
        kps = base + rng.uniform(-0.04, 0.04, base.shape)
        w0 = sparse_weights.values + rng.uniform(-0.05, 0.05, sparse_weights.n_pairs)

        def fn(t, x):
            return t.edges(t.constant(kps), x, edge_cfg_max)
        return fn, w0, 1.0

    def combine():
        e_t = rng.uniform(0.05, 0.45, (8, 8))
        offset = rng.uniform(0.05, 0.4, (8, 8)) * rng.choice([-1.0, 1.0], (8, 8))
        e_tk = np.clip(e_t + offset, 0.0, 0.9)
        e_tk = np.where(np.abs(e_tk - e_t) < 0.05, e_t + 0.1, e_tk)

        def fn(t, x):
            return t.combine(t.record("split", x.value[0], [x], _split_vjp(x.shape, 0)),
                             t.record("split", x.value[1], [x], _split_vjp(x.shape, 1)))
        return fn, np.stack([e_t, e_tk]), 1.0

    def mse():
        target = rng.random((8, 8))
        return (lambda t, x: t.mse(x, target)), rng.random((8, 8)), 1.0

    def length():
        weights = EdgeWeights(5, values=rng.choice([-0.3, 0.4], 10))
        weights.values[0] = 0.5
        x0 = rng.normal(0.0, 200.0, (5, 3))
        state = LengthState(weights.n_pairs)
        lengths = edge_lengths(x0, weights.pairs)
        state.l_avg[:] = lengths * rng.choice([0.5, 1.5], lengths.size)
        state.initialized[:] = True
        return (lambda t, x: t.length(x, weights, state)), x0, 100.0

    def separation():
        return (lambda t, x: t.separation(x, 0.08)), 0.5 + 0.08 * rng.standard_normal((5, 3)), 1.0

    def volume_chain():
        coords = grid.flat_coords

        def fn(t, x):
            hm = t.softmax2d(x)
            agg = t.aggregate([t.unproject(plan, hm), t.unproject(plan2, hm)])
            pts = t.spatial_softmax(agg, coords, tau=0.05)
            return t.project(pts, cam)
        return fn, rng.standard_normal((10, 12, 2)), 1.0

    return {
        "softmax2d": softmax2d,
        "unproject": unproject,
        "aggregate": aggregate,
        "affine": affine,
        "spatial_softmax": spatial_softmax,
        "project": project,
        "segment_distance": segment_distance,
        "edge_gaussian": edge_gaussian,
        "max_aggregation": max_aggregation,
        "edge_weights": edge_weights,
        "combine": combine,
        "mse": mse,
        "length": length,
        "separation": separation,
        "volume_chain": volume_chain,
    }


def _split_vjp(shape, i):
    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return [out]
    return backward


def _random_segment(rng: np.random.Generator) -> np.ndarray:
    while True:
        seg = rng.uniform(0.2, 0.8, (2, 2))
        if np.linalg.norm(seg[1] - seg[0]) > 0.2:
            return seg


def run_gradcheck(samples: int = 100, seed: int = 0, tol: float = 1e-3,
                  ops: Optional[Sequence[str]] = None) -> List[GradcheckResult]:
    rng = np.random.default_rng(seed)
    cases = _gradcheck_cases(rng)
    names = list(ops) if ops else list(cases)
    results = []
    for name in names:
        if name not in cases:
            raise ValidationError("gradcheck_op", f"opération inconnue '{name}'")
        start = time.time()
        worst = 0.0
        for _ in range(samples):
            fn, x0, scale = cases[name]()
            worst = max(worst, _directional_check(fn, x0, scale, rng))
        result = GradcheckResult(op=name, samples=samples, max_rel_error=worst,
                                 passed=worst < tol, seconds=time.time() - start)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, f"[GRADCHECK] {name}: erreur max {worst:.2e} ({'OK' if result.passed else 'ÉCHEC'})")
        results.append(result)
    return results


def format_gradcheck_table(results: Sequence[GradcheckResult]) -> str:
    lines = [f"{'opération':<18}{'tirages':>8}{'erreur max':>14}{'temps (s)':>11}  statut", "-" * 60]
    for r in results:
        lines.append(f"{r.op:<18}{r.samples:>8}{r.max_rel_error:>14.2e}{r.seconds:>11.2f}  "
                     f"{'OK' if r.passed else 'ÉCHEC'}")
    return "\n".join(lines)
