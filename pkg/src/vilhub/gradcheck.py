"""Central finite-difference checks of the analytic loss and encoder gradients
at 64-bit precision, on small seeded random instances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledShape, PointCloud
from .encoder import EncoderDims, EncoderOutput, backward, forward, init_params
from .losses import (LossConfig, class_preference, cross_entropy_with_grad, loss_and_grad,
                     total_loss, vilhub_loss)

TOLERANCE = 1e-5
# gradients below this magnitude are compared in absolute terms, which keeps
# the central-difference roundoff (about 1e-15 * |L| / eps) from dominating
GRAD_FLOOR = 1e-3
GAMMAS = (0.0, 0.5, 5.0)
TAUS = (0.07, 1.0)


def fd_step(w: float) -> float:
    return 1e-6 * max(1.0, abs(w))


def rel_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    """Worst relative error seen per parameter group / loss term."""
    worst: dict = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0
    instances: int = 0

    def record(self, name: str, err: float) -> None:
        self.worst[name] = max(self.worst.get(name, 0.0), err)
        self.checked += 1

    def failures(self, tol: float = TOLERANCE) -> list:
        return sorted(k for k, v in self.worst.items() if not v < tol)

    @property
    def passed(self) -> bool:
        return not self.failures()


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def check_loss_instance(rng, gamma: float, tau: float, report: GradCheckReport,
                        corrupt: bool = False) -> None:
    """Compare dL/df for the vl term, the hub term and their sum against central differences.

    The numeric side uses the reference composition ``total_loss``, which
    shares no code with the closed-form gradient.
    """
    n, c, d = int(rng.integers(2, 17)), int(rng.integers(2, 7)), int(rng.integers(2, 5))
    f, t = _unit_rows(rng, n, d), _unit_rows(rng, c, d)
    y = rng.integers(0, c, n)
    cfg = LossConfig(tau, gamma)
    g_vl = loss_and_grad(f, t, y, LossConfig(tau, 0.0))[2]
    g_tot = loss_and_grad(f, t, y, cfg)[2]
    if corrupt:
        g_tot = g_tot * 1.01

    def terms(x):
        bd, probs = total_loss(x, t, y, cfg)
        return bd.vl, vilhub_loss(class_preference(probs)), bd.total

    for idx in np.ndindex(f.shape):
        w = f[idx]
        e = fd_step(w)
        f[idx] = w + e
        plus = terms(f)
        f[idx] = w - e
        minus = terms(f)
        f[idx] = w
        num = [(a - b) / (2 * e) for a, b in zip(plus, minus)]
        report.record("loss:vl", rel_error(g_vl[idx], num[0]))
        report.record("loss:total", rel_error(g_tot[idx], num[2]))
        if gamma > 0:
            report.record("loss:hub", rel_error((g_tot[idx] - g_vl[idx]) / gamma, num[1]))


def _random_encoder_instance(rng):
    dims = EncoderDims(n_shape=int(rng.integers(2, 5)), d=int(rng.integers(2, 5)),
                       h1=int(rng.integers(2, 9)), h2=int(rng.integers(2, 9)),
                       head_hidden=int(rng.integers(2, 9)), prior_dim=int(rng.integers(1, 5)),
                       n_part=int(rng.integers(2, 6)), n_mat=int(rng.integers(2, 6)))
    params = init_params(dims, int(rng.integers(0, 2 ** 31)))
    for v in params.arrays.values():
        # nonzero biases so every bias gradient is exercised
        v += 0.1 * rng.standard_normal(v.shape)
    shapes = []
    for _ in range(2):
        n = int(rng.integers(1, 9))
        cloud = PointCloud(rng.uniform(-1, 1, (n, 3)), rng.uniform(0, 1, (n, 3)))
        shapes.append(LabeledShape(cloud, rng.integers(0, dims.n_part, n),
                                   rng.integers(0, dims.n_mat, n), int(rng.integers(0, dims.n_shape))))
    tables = {"part": _unit_rows(rng, dims.n_part, dims.d), "mat": _unit_rows(rng, dims.n_mat, dims.d),
              "ret": _unit_rows(rng, len(shapes), dims.d)}
    return params, shapes, tables


def encoder_objective(params, shapes, tables, cfg: LossConfig, use_prior: bool = True,
                      with_grads: bool = False):
    """Both head losses, the shape cross-entropy and a retrieval contrastive term."""
    out, cache = forward(params, shapes, use_prior)
    py = np.concatenate([s.part_labels for s in shapes])
    my = np.concatenate([s.material_labels for s in shapes])
    part, _, dp = loss_and_grad(out.part_features, tables["part"], py, cfg)
    mat, _, dm = loss_and_grad(out.material_features, tables["mat"], my, cfg)
    ce, dl = cross_entropy_with_grad(out.shape_logits, [s.shape_class for s in shapes])
    ret, _, dr = loss_and_grad(out.retrieval, tables["ret"], np.arange(len(shapes)),
                               LossConfig(cfg.tau, 0.0))
    total = part.total + mat.total + ce + ret.total
    if not with_grads:
        return total, cache
    return total, backward(params, cache, EncoderOutput(dp, dm, dl, dr))


def _pattern(cache):
    """ReLU masks and pooling winners; a finite difference is only valid if they stay put."""
    return [(sc.h1_t > 0, sc.h2_t > 0, sc.hidden > 0, sc.argmax) for sc in cache.shapes]


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for pa, pb in zip(a, b) for x, y in zip(pa, pb))


def check_encoder_instance(rng, gamma: float, tau: float, report: GradCheckReport,
                           coords_per_group: int = 4, corrupt: bool = False) -> None:
    params, shapes, tables = _random_encoder_instance(rng)
    cfg = LossConfig(tau, gamma)
    _, grads = encoder_objective(params, shapes, tables, cfg, with_grads=True)
    if corrupt:
        grads.arrays["w1"] *= 1.01
    base = _pattern(encoder_objective(params, shapes, tables, cfg)[1])
    for name, arr in params.arrays.items():
        if name == "prior_table":
            # only the rows of the classes in the batch receive gradient
            rows = sorted({s.shape_class for s in shapes})
            pool = [(r, j) for r in rows for j in range(arr.shape[1])]
        else:
            pool = list(np.ndindex(arr.shape))
        pick = rng.choice(len(pool), size=min(coords_per_group, len(pool)), replace=False)
        for i in pick:
            idx = pool[int(i)]
            w = arr[idx]
            e = fd_step(w)
            arr[idx] = w + e
            lp, cp = encoder_objective(params, shapes, tables, cfg)
            arr[idx] = w - e
            lm, cm = encoder_objective(params, shapes, tables, cfg)
            arr[idx] = w
            if not (_same_pattern(base, _pattern(cp)) and _same_pattern(base, _pattern(cm))):
                report.skipped += 1
                continue
            report.record(f"encoder:{name}", rel_error(grads.arrays[name][idx], (lp - lm) / (2 * e)))


def run_grad_check(seed: int = 0, instances: int = 100, gammas=GAMMAS, taus=TAUS,
                   coords_per_group: int = 4, corrupt: bool = False) -> GradCheckReport:
    """``instances`` random (loss, encoder) instance pairs, cycling through every
    (gamma, tau) combination so each one is covered."""
    combos = [(g, t) for g in gammas for t in taus]
    if instances < len(combos):
        raise ValueError(f"need at least {len(combos)} instances to cover every (gamma, tau)")
    rng = np.random.default_rng([int(seed), 17])
    report = GradCheckReport()
    for i in range(instances):
        gamma, tau = combos[i % len(combos)]
        check_loss_instance(rng, gamma, tau, report, corrupt)
        check_encoder_instance(rng, gamma, tau, report, coords_per_group, corrupt)
        report.instances += 1
    return report
