"""Point-cloud training: the eikonal fitting loss, the coarse-to-fine
blend schedule, sphere pretraining, and the epoch loop.

The loss consumes oriented surface samples plus fresh uniform off-surface
queries each step. Per-term reduction is the batch mean, so the loss
weights are batch-size invariant. The blend schedule runs the smooth
base field alone for the first stretch of training, then cross-fades
both the loss and the two networks' learning rates toward the composed
field.
"""

import dataclasses
import math
import os
import warnings

import numpy as np
import torch

from .errors import ConfigError, TrainingDivergence, ValidationError
from .geometry import OrientedPointCloud
from .precision import get_dtype, set_deterministic, set_precision
from .sirens import loss_backward

TERM_NAMES = ("eikonal", "surface_abs", "normal", "offsurface")
HISTORY_COLUMNS = ("epoch",) + TERM_NAMES + ("total", "kappa", "lr")

DEFAULT_LAMBDAS = (5.0, 400.0, 40.0, 50.0)
UNIT_NORMAL_TOL = 1e-6


@dataclasses.dataclass
class TrainConfig:
    """Knobs for fit(). Defaults reproduce the reference schedule."""

    lambdas: tuple = DEFAULT_LAMBDAS
    epochs: int = 120
    batch_surface: int = 4096
    batch_offsurface: int = 4096
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    anneal_start_fraction: float = 0.8
    T_m: float = 0.2
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    signed_void: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ConfigError("lambdas must be four nonnegative weights")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_surface <= 0 or self.batch_offsurface <= 0:
            raise ConfigError("batch sizes must be positive")
        if not (self.lr_init > 0 and self.lr_final > 0):
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.anneal_start_fraction <= 1.0:
            raise ConfigError("anneal_start_fraction must lie in [0, 1]")
        if not 0.0 <= self.T_m < 1.0:
            raise ConfigError(f"T_m must lie in [0, 1), got {self.T_m}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(d)
        if "lambdas" in kwargs:
            kwargs["lambdas"] = tuple(kwargs["lambdas"])
        return cls(**kwargs)


def progressive_blend(t, T_m=0.2):
    """Blend weight for the base-field loss at training fraction t.

    1 until T_m, then a half cosine down to 0 at t = 1.
    """
    if not 0.0 <= T_m < 1.0:
        raise ConfigError(f"T_m must lie in [0, 1), got {T_m}")
    if t <= T_m:
        return 1.0
    if t >= 1.0:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * (t - T_m) / (1.0 - T_m)))


def annealed_lr(t, lr_init, lr_final, anneal_start_fraction):
    """Cosine-annealed learning rate: flat at lr_init until the start
    fraction, then half a cosine down to lr_final at t = 1."""
    a = anneal_start_fraction
    if t <= a:
        return lr_init
    if a >= 1.0:
        return lr_init
    s = min((t - a) / (1.0 - a), 1.0)
    return lr_final + (lr_init - lr_final) * 0.5 * (1.0 + math.cos(math.pi * s))


def _values_and_grads(sdf_eval, x):
    """Field values and spatial gradients at x, both carrying graph.

    Prefers an analytic value_and_grad method when the field provides
    one; anything else goes through reverse mode on a leaf copy.
    """
    from .model import DisplacementModel

    vg = getattr(sdf_eval, "value_and_grad", None)
    if vg is not None:
        out = vg(x)
        return out[0], out[1]
    xg = x.detach().clone().requires_grad_(True)
    if isinstance(sdf_eval, DisplacementModel):
        vals = sdf_eval.detail_sdf(xg, on_degenerate="zero")
    else:
        vals = sdf_eval(xg)
    if vals.shape != (x.shape[0],):
        raise ConfigError(
            f"field must map (n, 3) to (n,), got output shape {tuple(vals.shape)}")
    (grads,) = torch.autograd.grad(vals.sum(), xg, create_graph=True)
    return vals, grads


def loss_terms(sdf_eval, surface_points, surface_normals, offsurface_points,
               signed_void=False):
    """The four unweighted loss terms as graph tensors.

    eikonal: mean |1 - gradient norm| over surface and off-surface
    queries together. surface_abs: mean |field| at surface points.
    normal: mean (1 - cos(gradient, stored normal)) at surface points.
    offsurface: mean exp(-100 |field|) at free points (signed_void drops
    the absolute value).

    The normal term divides by the gradient length rather than trusting
    the eikonal term to keep it at 1: with the raw inner product the
    term is unbounded below (growing the gradient along n is rewarded
    at weight lambda2 but only penalized at lambda0), and at the
    default weights training reliably runs away. On a unit-gradient
    field both forms agree exactly.

    Empty batches contribute a zero term.
    """
    dtype = surface_points.dtype if surface_points.numel() else offsurface_points.dtype
    zero = torch.zeros((), dtype=dtype)
    norm_parts = []
    if surface_points.shape[0]:
        s_vals, s_grads = _values_and_grads(sdf_eval, surface_points)
        surface_abs = s_vals.abs().mean()
        lengths = s_grads.norm(dim=1).clamp_min(1e-12)
        cosine = (s_grads * surface_normals).sum(dim=1) / lengths
        normal = (1.0 - cosine).mean()
        norm_parts.append(s_grads.norm(dim=1))
    else:
        surface_abs = zero
        normal = zero
    if offsurface_points.shape[0]:
        o_vals, o_grads = _values_and_grads(sdf_eval, offsurface_points)
        arg = o_vals if signed_void else o_vals.abs()
        offsurface = torch.exp(-100.0 * arg).mean()
        norm_parts.append(o_grads.norm(dim=1))
    else:
        offsurface = zero
    if norm_parts:
        eikonal = (torch.cat(norm_parts) - 1.0).abs().mean()
    else:
        eikonal = zero
    return {"eikonal": eikonal, "surface_abs": surface_abs,
            "normal": normal, "offsurface": offsurface}


def weight_terms(terms, lambdas):
    lam = tuple(float(v) for v in lambdas)
    if len(lam) != 4:
        raise ConfigError("lambdas must have four entries")
    total = None
    for w, name in zip(lam, TERM_NAMES):
        part = w * terms[name]
        total = part if total is None else total + part
    return total


def _check_unit_normals(normals):
    lengths = normals.norm(dim=1)
    if normals.shape[0] and not bool(
            ((lengths - 1.0).abs() <= UNIT_NORMAL_TOL).all()):
        worst = float((lengths - 1.0).abs().max())
        raise ValidationError(
            f"surface normals must be unit length (worst deviation {worst:.3e})")


def siren_loss(sdf_eval, surface, offsurface, lambdas=DEFAULT_LAMBDAS,
               signed_void=False, params=None):
    """Weighted point-cloud loss with optional parameter gradients.

    surface is an OrientedPointCloud or a (points, normals) pair;
    offsurface is an (m, 3) batch. Returns (total, param_grads, terms):
    total as a float, param_grads as a list matching params (empty when
    params is None), terms as floats keyed by TERM_NAMES.
    """
    dtype = get_dtype()
    if isinstance(surface, OrientedPointCloud):
        pts, nrm = surface.points, surface.normals
    else:
        pts, nrm = surface
    spts = torch.as_tensor(np.asarray(pts), dtype=dtype)
    snrm = torch.as_tensor(np.asarray(nrm), dtype=dtype)
    if spts.shape != snrm.shape or (spts.numel() and spts.shape[1] != 3):
        raise ConfigError("surface points and normals must both be (n, 3)")
    _check_unit_normals(snrm)
    off = torch.as_tensor(np.asarray(offsurface), dtype=dtype)
    if off.numel() == 0:
        off = off.reshape(0, 3)
    terms = loss_terms(sdf_eval, spts, snrm, off, signed_void=signed_void)
    total = weight_terms(terms, lambdas)
    grads = loss_backward(total, params) if params is not None else []
    return float(total.detach()), grads, {k: float(v.detach()) for k, v in terms.items()}


@dataclasses.dataclass
class PretrainReport:
    mean_abs_residual: float
    threshold: float
    steps: int
    converged: bool


def sphere_pretrain(net, radius=0.5, steps=1000, seed=0, batch=4096,
                    lr=5e-4, threshold=5e-3, validation_samples=10000):
    """Regress a network toward the SDF of an origin-centered sphere.

    Plain L2 on uniform samples in [-1, 1]^3. Non-convergence within
    the step budget warns and flags the report, it does not raise.
    """
    if not 0.0 < radius < 1.0:
        raise ConfigError(f"radius must lie in (0, 1), got {radius}")
    if steps < 0:
        raise ConfigError("steps must be nonnegative")
    dtype = get_dtype()
    gen = torch.Generator().manual_seed(int(seed))
    if steps > 0:
        opt = torch.optim.Adam(net.parameters(), lr=lr,
                               betas=(0.9, 0.999), eps=1e-8)
        for _ in range(steps):
            x = torch.rand((batch, 3), generator=gen, dtype=dtype) * 2.0 - 1.0
            target = x.norm(dim=1) - radius
            loss = ((net(x) - target) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    with torch.no_grad():
        x = torch.rand((validation_samples, 3), generator=gen, dtype=dtype) * 2.0 - 1.0
        residual = float((net(x) - (x.norm(dim=1) - radius)).abs().mean())
    converged = residual < threshold
    if not converged and steps > 0:
        warnings.warn(
            f"sphere pretraining stopped at residual {residual:.3e} "
            f"(threshold {threshold:.1e}) after {steps} steps",
            RuntimeWarning, stacklevel=2)
    return net, PretrainReport(mean_abs_residual=residual, threshold=threshold,
                               steps=steps, converged=converged)


class TrainingHistory:
    """Per-epoch record of the loss terms and schedule state."""

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def append(self, **row):
        missing = set(HISTORY_COLUMNS) - set(row)
        if missing:
            raise ConfigError(f"history row missing columns: {sorted(missing)}")
        self.rows.append({k: row[k] for k in HISTORY_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def column(self, name):
        return [row[name] for row in self.rows]

    def to_csv(self):
        lines = [",".join(HISTORY_COLUMNS)]
        for row in self.rows:
            cells = [str(row["epoch"])]
            cells += ["%.17g" % row[c] for c in HISTORY_COLUMNS[1:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0].split(",") != list(HISTORY_COLUMNS):
            raise ConfigError("history CSV header does not match")
        rows = []
        for ln in lines[1:]:
            cells = ln.split(",")
            row = {"epoch": int(cells[0])}
            row.update({c: float(v) for c, v in zip(HISTORY_COLUMNS[1:], cells[1:])})
            rows.append(row)
        return cls(rows)


@dataclasses.dataclass
class FitResult:
    model: object
    history: TrainingHistory
    steps: int


def fit_base(net, cloud, config=None, out_dir=None):
    """Train a single network on the point-cloud loss, no blending.

    Used wherever one field is fit directly: standalone smooth-shape
    fits and the base stages of detail transfer. The blend column in
    the history stays at 1 (the field being supervised is the one
    returned). checkpoint_every is ignored here; pass out_dir to get
    history.csv.
    """
    config = config or TrainConfig()
    cloud.validate(require_unit=True, require_bounds=False)
    if len(cloud) == 0:
        raise ConfigError("training cloud is empty")
    set_precision(config.precision)
    if config.deterministic:
        set_deterministic(True)
    dtype = get_dtype()
    net = net.to(dtype)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    pool_pts = torch.as_tensor(cloud.points, dtype=dtype)
    pool_nrm = torch.as_tensor(cloud.normals, dtype=dtype)
    pool = len(cloud)
    steps_per_epoch = max(1, math.ceil(pool / config.batch_surface))
    total_steps = config.epochs * steps_per_epoch
    gen = torch.Generator().manual_seed(int(config.seed))
    params = list(net.parameters())
    opt = torch.optim.Adam(params, lr=config.lr_init, betas=(0.9, 0.999),
                           eps=1e-8)

    history = TrainingHistory()
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(pool, generator=gen)
        sums = dict.fromkeys(TERM_NAMES + ("total", "lr"), 0.0)
        for k in range(steps_per_epoch):
            rows = order[k * config.batch_surface:(k + 1) * config.batch_surface]
            off = torch.rand((config.batch_offsurface, 3),
                             generator=gen, dtype=dtype) * 2.0 - 1.0
            lr = annealed_lr(step / total_steps, config.lr_init,
                             config.lr_final, config.anneal_start_fraction)
            terms = loss_terms(net, pool_pts[rows], pool_nrm[rows], off,
                               signed_void=config.signed_void)
            total = weight_terms(terms, config.lambdas)
            if not bool(torch.isfinite(total.detach())):
                snapshot = {k2: float(v.detach()) for k2, v in terms.items()}
                raise TrainingDivergence(
                    epoch=epoch, step=step, terms=snapshot,
                    detail=f"non-finite loss; grad norm {_grad_norm(params):.3e}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.param_groups[0]["lr"] = lr
            opt.step()
            for name in TERM_NAMES:
                sums[name] += float(terms[name].detach())
            sums["total"] += float(total.detach())
            sums["lr"] += lr
            step += 1
        row = {name: sums[name] / steps_per_epoch
               for name in TERM_NAMES + ("total", "lr")}
        history.append(epoch=epoch, kappa=1.0, **row)

    if out_dir is not None:
        history.write_csv(os.path.join(out_dir, "history.csv"))
    return FitResult(model=net, history=history, steps=step)


def _grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def fit(model, cloud, config=None, out_dir=None):
    """Train a displacement model on an oriented point cloud.

    The cloud is the presampled surface pool; each epoch visits it once
    in a fresh random order while off-surface queries are redrawn
    uniformly from [-1, 1]^3 every step. Writes history.csv plus
    checkpoints under out_dir when given. A non-finite loss aborts with
    a diagnostic snapshot.
    """
    from .model import DisplacementModel

    config = config or TrainConfig()
    if not isinstance(model, DisplacementModel):
        raise ConfigError("fit expects a DisplacementModel")
    cloud.validate(require_unit=True, require_bounds=False)
    if len(cloud) == 0:
        raise ConfigError("training cloud is empty")
    set_precision(config.precision)
    if config.deterministic:
        set_deterministic(True)
    dtype = get_dtype()
    model = model.to(dtype)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    progressive = model.switches.progressive
    pool_pts = torch.as_tensor(cloud.points, dtype=dtype)
    pool_nrm = torch.as_tensor(cloud.normals, dtype=dtype)
    pool = len(cloud)
    steps_per_epoch = max(1, math.ceil(pool / config.batch_surface))
    total_steps = config.epochs * steps_per_epoch
    gen = torch.Generator().manual_seed(int(config.seed))
    params_base = list(model.base.parameters())
    params_disp = list(model.disp.parameters())
    opt = torch.optim.Adam(
        [{"params": params_base, "lr": config.lr_init},
         {"params": params_disp, "lr": 0.0}],
        betas=(0.9, 0.999), eps=1e-8)

    history = TrainingHistory()
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(pool, generator=gen)
        sums = dict.fromkeys(TERM_NAMES + ("total", "kappa", "lr"), 0.0)
        for k in range(steps_per_epoch):
            rows = order[k * config.batch_surface:(k + 1) * config.batch_surface]
            spts, snrm = pool_pts[rows], pool_nrm[rows]
            off = torch.rand((config.batch_offsurface, 3),
                             generator=gen, dtype=dtype) * 2.0 - 1.0
            t = step / total_steps
            kappa = progressive_blend(t, config.T_m) if progressive else 0.0
            lr = annealed_lr(t, config.lr_init, config.lr_final,
                             config.anneal_start_fraction)
            if kappa == 1.0:
                terms = loss_terms(model.base, spts, snrm, off,
                                   signed_void=config.signed_void)
            elif kappa == 0.0:
                terms = loss_terms(model, spts, snrm, off,
                                   signed_void=config.signed_void)
            else:
                t_base = loss_terms(model.base, spts, snrm, off,
                                    signed_void=config.signed_void)
                t_comp = loss_terms(model, spts, snrm, off,
                                    signed_void=config.signed_void)
                terms = {name: kappa * t_base[name] + (1.0 - kappa) * t_comp[name]
                         for name in TERM_NAMES}
            total = weight_terms(terms, config.lambdas)
            if not bool(torch.isfinite(total.detach())):
                snapshot = {k2: float(v.detach()) for k2, v in terms.items()}
                raise TrainingDivergence(
                    epoch=epoch, step=step, terms=snapshot,
                    detail=(f"non-finite loss; grad norms base="
                            f"{_grad_norm(params_base):.3e} "
                            f"disp={_grad_norm(params_disp):.3e}"))
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.param_groups[0]["lr"] = lr * kappa if progressive else lr
            opt.param_groups[1]["lr"] = lr * (1.0 - kappa) if progressive else lr
            opt.step()
            for name in TERM_NAMES:
                sums[name] += float(terms[name].detach())
            sums["total"] += float(total.detach())
            sums["kappa"] += kappa
            sums["lr"] += lr
            step += 1
        row = {name: sums[name] / steps_per_epoch
               for name in TERM_NAMES + ("total", "kappa", "lr")}
        history.append(epoch=epoch, **row)
        if (out_dir is not None and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0):
            model.save_bundle(os.path.join(out_dir, f"epoch_{epoch + 1:04d}"))

    if out_dir is not None:
        history.write_csv(os.path.join(out_dir, "history.csv"))
        model.save_bundle(os.path.join(out_dir, "final"))
    return FitResult(model=model, history=history, steps=step)
