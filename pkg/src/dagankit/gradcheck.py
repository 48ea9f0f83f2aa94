"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


@dataclass
class GradReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def finite_diff_check(
    fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], epsilon: float = 1e-5
) -> GradReport:
    """Compare backward() against (f(x+e) - f(x-e)) / 2e for every input coordinate.

    ``fn`` receives one Tensor per input and must return a scalar Tensor.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    params = [T.parameter(a) for a in arrays]
    loss = fn(*params)
    analytic = T.grad(loss, params)

    def evaluate(vals):
        with T.no_grad():
            return fn(*[T.constant(v) for v in vals]).item()

    numeric = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        for i in range(a.size):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[k].reshape(-1)[i] += epsilon
            minus[k].reshape(-1)[i] -= epsilon
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2 * epsilon)
        numeric.append(g)
    err = max((float(relative_error(a, f).max()) if a.size else 0.0) for a, f in zip(analytic, numeric))
    return GradReport(analytic, numeric, err)


# ---------------------------------------------------------------------------
# suite

@dataclass
class Check:
    name: str
    fn: Callable[..., T.Tensor]
    inputs: list[np.ndarray]
    kind: str = "primitive"


@dataclass
class CheckResult:
    name: str
    kind: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _weighted(out: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    w = T.constant(rng.normal(size=out.shape))
    return T.sum(out * w)


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def primitive_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    wr = np.random.default_rng(seed + 1)  # output weights, drawn once per check

    def w(f):
        weights = {}

        def fn(*xs):
            out = f(*xs)
            if id(f) not in weights:
                weights[id(f)] = wr.normal(size=out.shape)
            return T.sum(out * T.constant(weights[id(f)]))

        return fn

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    img = rng.uniform(0, 1, size=(1, 2, 6, 6))
    mask = rng.random((3, 4)) > 0.5
    grid = rng.uniform(-1.1, 1.1, size=(1, 4, 5, 2))
    return [
        Check("add", w(lambda x, y: T.add(x, y)), [a, b]),
        Check("sub", w(lambda x, y: T.sub(x, y)), [a, b]),
        Check("mul", w(lambda x, y: T.mul(x, y)), [a, b]),
        Check("div", w(lambda x, y: T.div(x, y)), [a, pos]),
        Check("neg", w(lambda x: T.neg(x)), [a]),
        Check("scale", w(lambda x: T.scale(x, -2.5)), [a]),
        Check("abs", w(lambda x: T.abs(x)), [_away_from_zero(rng, (3, 4))]),
        Check("sigmoid", w(lambda x: T.sigmoid(x)), [a]),
        Check("relu", w(lambda x: T.relu(x)), [_away_from_zero(rng, (3, 4))]),
        Check("leaky_relu", w(lambda x: T.leaky_relu(x, 0.2)), [_away_from_zero(rng, (3, 4))]),
        Check("softplus", w(lambda x: T.softplus(x)), [a]),
        Check("exp", w(lambda x: T.exp(x)), [a]),
        Check("log", w(lambda x: T.log(x)), [pos]),
        Check("sqrt", w(lambda x: T.sqrt(x)), [pos]),
        Check("sin", w(lambda x: T.sin(x)), [a]),
        Check("cos", w(lambda x: T.cos(x)), [a]),
        Check("where_const", w(lambda x: T.where_const(mask, x, 0.5)), [a]),
        Check("broadcast_to", w(lambda x: T.broadcast_to(x, (2, 3, 4))), [rng.normal(size=(3, 1))]),
        Check("sum", w(lambda x: T.sum(x, axis=1, keepdims=True)), [a]),
        Check("mean", w(lambda x: T.mean(x, axis=0)), [a]),
        Check("reshape", w(lambda x: T.reshape(x, (2, 6))), [a]),
        Check("transpose", w(lambda x: T.transpose(x, (1, 0))), [a]),
        Check("concat", w(lambda x, y: T.concat([x, y], axis=1)), [a, b]),
        Check("stack", w(lambda x, y: T.stack([x, y], axis=0)), [a, b]),
        Check("index", w(lambda x: x[1:, ::2]), [a]),
        Check("matmul", w(lambda x, y: T.matmul(x, y)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        Check("conv2d", w(lambda x, k, bb: T.conv2d(x, k, bb, stride=2, padding=1)),
              [img, rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        Check("softmax", w(lambda x: T.softmax(x, axis=-1)), [a]),
        Check("grid_sample_bilinear", w(lambda x, g: T.grid_sample_bilinear(x, g)), [img, grid]),
        Check("avg_pool", w(lambda x: T.avg_pool(x, 2)), [img]),
        Check("upsample_bilinear", w(lambda x: T.upsample_bilinear(x, 2)), [img[:, :, :3, :3]]),
        Check("pad_reflect", w(lambda x: T.pad_reflect(x, 1)), [img]),
        Check("box_filter", w(lambda x: T.box_filter(x, 3)), [img]),
        Check("resample", w(lambda x: T.resample(x, 0.5, "average-pool-down")), [img]),
        Check("axis_angle_to_rotation", w(lambda v: _camera().axis_angle_to_rotation(v)),
              [rng.normal(size=(2, 3)) * 0.5]),
        Check("axis_angle_to_rotation:series", w(lambda v: _camera().axis_angle_to_rotation(v)),
              [rng.normal(size=(2, 3)) * 1e-4]),
    ]


def _camera():
    from . import camera

    return camera


def composite_checks(seed: int = 0) -> list[Check]:
    from .attention import AttentionParams, cross_attention
    from .camera import Intrinsics, RelativePose, axis_angle_to_rotation, reproject, synthesize_view
    from .keypoints import OcclusionNet, motion_bundle, warp_features
    from .photometric import photometric_error

    rng = np.random.default_rng(seed + 7)
    h = w = 8
    target = rng.uniform(0, 1, size=(1, 3, h, w))
    K = Intrinsics.from_values(7.0, 7.5, 3.6, 3.4)

    def pe_path(depth, aa, t, source):
        pose = RelativePose(axis_angle_to_rotation(aa), t)
        warped, m = synthesize_view(source, reproject(depth, K, pose))
        return photometric_error(T.constant(target), warped, mask=m)

    occ = OcclusionNet(np.random.default_rng(seed + 8), ch=4)
    image = rng.uniform(0, 1, size=(1, 3, 32, 32))

    def fw_path(kp_src, kp_drv, feats):
        bundle = motion_bundle(occ, image, kp_src, kp_drv, (8, 8))
        out = warp_features(None, image, bundle, features=feats)
        return T.sum(out * T.constant(fw_weights))

    fw_weights = rng.normal(size=(1, 3, 8, 8))
    attn = AttentionParams(np.random.default_rng(seed + 9), depth_ch=3, feat_ch=4)
    fg_weights = rng.normal(size=(1, 4, 3, 3))

    def fg_path(F_d, F_w):
        F_g, _ = cross_attention(attn, F_d, F_w)
        return T.sum(F_g * T.constant(fg_weights))

    return [
        Check("composite:pe_through_reproject", pe_path,
              [rng.uniform(2.0, 4.0, size=(1, 1, h, w)), rng.normal(size=(1, 3)) * 0.05,
               rng.normal(size=(1, 3)) * 0.1, rng.uniform(0, 1, size=(1, 3, h, w))], "composite"),
        Check("composite:warped_features_through_motion_bundle", fw_path,
              [rng.uniform(-0.6, 0.6, size=(1, 3, 2)), rng.uniform(-0.6, 0.6, size=(1, 3, 2)),
               rng.normal(size=(1, 3, 8, 8))], "composite"),
        Check("composite:attention_output", fg_path,
              [rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(1, 4, 3, 3))], "composite"),
    ]


def run_suite(checks: Sequence[Check] | None = None, epsilon: float = 1e-5) -> list[CheckResult]:
    checks = list(checks) if checks is not None else primitive_checks() + composite_checks()
    names = [c.name for c in checks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate check names")
    return [CheckResult(c.name, c.kind, finite_diff_check(c.fn, c.inputs, epsilon).max_rel_error) for c in checks]
